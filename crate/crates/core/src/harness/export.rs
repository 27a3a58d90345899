use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SweepRow;
use crate::error::Result;

pub const CSV_COLUMNS: [&str; 11] = [
    "white_box",
    "black_box",
    "loss",
    "tap",
    "rank_or_random",
    "c",
    "seed",
    "n_images",
    "tsuc",
    "ttr",
    "runtime_s",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportFormat {
    Csv,
    Json,
}

/// Writes rows in long format. An undefined tTR is written as `n/a` and an
/// unrecorded runtime as an empty field.
pub fn write_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.white_box.clone(),
            r.black_box.clone(),
            r.loss.to_string(),
            r.tap.to_string(),
            r.rank_or_random.clone(),
            r.c.to_string(),
            r.seed.to_string(),
            r.n_images.to_string(),
            r.tsuc.to_string(),
            r.ttr.map_or_else(|| "n/a".to_string(), |v| v.to_string()),
            r.runtime_s.map_or_else(String::new, |v| format!("{v:.3}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, rows)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json(path: &Path) -> Result<Vec<SweepRow>> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::LossKind;

    fn row(seed: u64, ttr: Option<f64>) -> SweepRow {
        SweepRow {
            white_box: "vgg".into(),
            black_box: "resnet".into(),
            loss: LossKind::PaaPoly,
            tap: 2,
            rank_or_random: "random".into(),
            c: 0.1,
            seed,
            n_images: 50,
            tsuc: 38.0,
            ttr,
            runtime_s: None,
        }
    }

    #[test]
    fn empty_csv_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&[], &p).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            format!("{}\n", CSV_COLUMNS.join(","))
        );
    }

    #[test]
    fn csv_rows_and_markers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&[row(0, Some(50.0)), row(1, None)], &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "vgg,resnet,paa_p,2,random,0.1,0,50,38,50,");
        assert_eq!(lines[2], "vgg,resnet,paa_p,2,random,0.1,1,50,38,n/a,");
    }

    #[test]
    fn json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.json");
        let rows = vec![row(0, Some(12.5)), row(1, None)];
        write_json(&rows, &p).unwrap();
        assert_eq!(read_json(&p).unwrap(), rows);
    }
}
