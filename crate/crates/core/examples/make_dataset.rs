//! Generates the procedural pattern dataset, round-trips it through IDX files
//! and prints one image per class as ASCII art.

use saat::data::{ingest_idx, synth, write_idx};

fn main() -> saat::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("saat-data"));
    std::fs::create_dir_all(&dir)?;
    let data = synth::generate(20, 7);
    let (images, labels) = (dir.join("images.idx"), dir.join("labels.idx"));
    write_idx(&data, &images, &labels)?;
    let back = ingest_idx(&images, &labels, synth::NUM_CLASSES)?;
    assert_eq!(back, data);
    println!(
        "{} images of {}x{} written to {}",
        back.len(),
        back.height(),
        back.width(),
        dir.display()
    );

    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for (class, name) in synth::CLASS_NAMES.iter().enumerate() {
        let i = back.indices_of(class)[0];
        println!("\n{class}: {name}");
        for row in back.pixels(i).chunks(back.width()).step_by(2) {
            let line: String = row
                .iter()
                .map(|&p| shades[((p * shades.len() as f64) as usize).min(shades.len() - 1)])
                .collect();
            println!("  {line}");
        }
    }
    Ok(())
}
