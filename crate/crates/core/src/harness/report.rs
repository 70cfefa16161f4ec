use std::path::Path;

use serde::Serialize;

use crate::error::Result;

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, to_jsonl(rows)?)?;
    Ok(())
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    std::fs::write(path, to_csv(rows)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Serialize)]
    struct Row {
        name: &'static str,
        value: f64,
        extra: Option<f64>,
    }

    #[test]
    fn jsonl_and_csv_layouts() {
        let rows = [
            Row { name: "auc", value: 0.5, extra: None },
            Row { name: "gauc", value: 0.25, extra: Some(1.0) },
        ];
        assert_eq!(
            to_jsonl(&rows).unwrap(),
            "{\"name\":\"auc\",\"value\":0.5,\"extra\":null}\n{\"name\":\"gauc\",\"value\":0.25,\"extra\":1.0}\n"
        );
        assert_eq!(to_csv(&rows).unwrap(), "name,value,extra\nauc,0.5,\ngauc,0.25,1.0\n");
    }
}
