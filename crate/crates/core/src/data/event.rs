use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Item row reserved for the mask token of the baseline augmentation.
pub const MASK_ITEM: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Behavior {
    Click,
    Favorite,
    Cart,
    Purchase,
}

impl Behavior {
    pub const ALL: [Behavior; 4] = [Behavior::Click, Behavior::Favorite, Behavior::Cart, Behavior::Purchase];

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::Click => "click",
            Behavior::Favorite => "fav",
            Behavior::Cart => "cart",
            Behavior::Purchase => "buy",
        }
    }
}

impl fmt::Display for Behavior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Behavior {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "click" | "pv" => Ok(Behavior::Click),
            "fav" | "favorite" => Ok(Behavior::Favorite),
            "cart" => Ok(Behavior::Cart),
            "buy" | "purchase" => Ok(Behavior::Purchase),
            other => Err(format!("unknown behavior type `{other}`")),
        }
    }
}

/// One interaction. Ids are dense indices into a [`Vocab`]; item ids start
/// at 1 because 0 is [`MASK_ITEM`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Event {
    pub user: u32,
    pub item: u32,
    pub category: u32,
    pub behavior: Behavior,
    pub timestamp: i64,
}

/// String ids seen in an event log, interned to dense indices.
#[derive(Clone, Debug, Default)]
pub struct Vocab {
    users: Vec<String>,
    items: Vec<String>,
    categories: Vec<String>,
    item_category: Vec<u32>,
    user_ix: HashMap<String, u32>,
    item_ix: HashMap<String, u32>,
    category_ix: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self {
            items: vec!["<mask>".to_string()],
            item_category: vec![u32::MAX],
            ..Default::default()
        }
    }

    fn intern(names: &mut Vec<String>, ix: &mut HashMap<String, u32>, s: &str) -> u32 {
        if let Some(&i) = ix.get(s) {
            return i;
        }
        let i = names.len() as u32;
        names.push(s.to_string());
        ix.insert(s.to_string(), i);
        i
    }

    pub fn user(&mut self, s: &str) -> u32 {
        Self::intern(&mut self.users, &mut self.user_ix, s)
    }

    pub fn category(&mut self, s: &str) -> u32 {
        Self::intern(&mut self.categories, &mut self.category_ix, s)
    }

    /// Interns an item. The category of an item is fixed by its first occurrence.
    pub fn item(&mut self, s: &str, category: u32) -> u32 {
        let i = Self::intern(&mut self.items, &mut self.item_ix, s);
        if i as usize == self.item_category.len() {
            self.item_category.push(category);
        }
        i
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    /// Number of embedding rows needed, including the mask row.
    pub fn num_item_rows(&self) -> usize {
        self.items.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len() - 1
    }

    pub fn num_categories(&self) -> usize {
        self.categories.len()
    }

    pub fn user_name(&self, u: u32) -> &str {
        &self.users[u as usize]
    }

    pub fn item_name(&self, i: u32) -> &str {
        &self.items[i as usize]
    }

    pub fn category_name(&self, c: u32) -> &str {
        &self.categories[c as usize]
    }

    pub fn category_of(&self, item: u32) -> u32 {
        self.item_category[item as usize]
    }

    /// All real item ids (excluding the mask row).
    pub fn item_ids(&self) -> std::ops::Range<u32> {
        1..self.items.len() as u32
    }
}

/// A user's events in timestamp order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub user: u32,
    pub events: Vec<Event>,
}

impl Sequence {
    /// Keeps only the most recent `max_len` events.
    pub fn truncate_recent(&mut self, max_len: usize) {
        if self.events.len() > max_len {
            self.events.drain(..self.events.len() - max_len);
        }
    }
}

/// Parsed log: one [`Sequence`] per user (ordered by first appearance) plus
/// the vocabulary that decodes their ids.
#[derive(Clone, Debug, Default)]
pub struct EventLog {
    pub vocab: Vocab,
    pub sequences: Vec<Sequence>,
}

impl EventLog {
    pub fn num_events(&self) -> usize {
        self.sequences.iter().map(|s| s.events.len()).sum()
    }

    /// Writes the log back as TSV, users in sequence order, events in time order.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> Result<()> {
        for seq in &self.sequences {
            for e in &seq.events {
                writeln!(
                    w,
                    "{}\t{}\t{}\t{}\t{}",
                    self.vocab.user_name(e.user),
                    self.vocab.item_name(e.item),
                    self.vocab.category_name(e.category),
                    e.behavior,
                    e.timestamp
                )?;
            }
        }
        Ok(())
    }
}

/// Reads a `user, item, category, behavior, timestamp` TSV file.
pub fn parse_events(path: &Path) -> Result<EventLog> {
    let text = std::fs::read_to_string(path)?;
    parse_events_str(&text, path)
}

/// Parses TSV text; `origin` only labels error messages.
pub fn parse_events_str(text: &str, origin: &Path) -> Result<EventLog> {
    let mut vocab = Vocab::new();
    let mut per_user: BTreeMap<u32, Vec<Event>> = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line: n + 1,
            msg,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(err(format!("expected 5 tab-separated columns, found {}", cols.len())));
        }
        let behavior: Behavior = cols[3].parse().map_err(err)?;
        let timestamp: i64 = cols[4]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad timestamp `{}`", cols[4])))?;
        if timestamp < 0 {
            return Err(err(format!("negative timestamp {timestamp}")));
        }
        let user = vocab.user(cols[0]);
        let category = vocab.category(cols[2]);
        let item = vocab.item(cols[1], category);
        per_user.entry(user).or_default().push(Event {
            user,
            item,
            category: vocab.category_of(item),
            behavior,
            timestamp,
        });
    }
    let sequences = per_user
        .into_iter()
        .map(|(user, mut events)| {
            // stable: ties keep input order
            events.sort_by_key(|e| e.timestamp);
            Sequence { user, events }
        })
        .collect();
    Ok(EventLog { vocab, sequences })
}
