//! Regenerates `tests/fixtures/group_targeting.csv`.

use hetdecomp::oracle::group_targeting_example;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = group_targeting_example().sample(100_000, 31, 0)?;
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/group_targeting.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["y", "t", "x"])?;
    let alphabet = data.alphabet().unwrap();
    for (i, &c) in data.codes().unwrap().iter().enumerate() {
        w.write_record([format!("{:.6}", data.outcome()[i]), alphabet[c].clone(), format!("{}", data.row(i)[0])])?;
    }
    w.flush()?;
    println!("wrote {}", path.display());
    Ok(())
}
