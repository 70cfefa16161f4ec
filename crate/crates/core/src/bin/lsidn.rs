fn main() {
    lsidn::harness::cli::main();
}
