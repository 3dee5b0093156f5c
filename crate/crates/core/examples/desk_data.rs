//! Generates the procedural desk benchmark, round-trips it through the raw
//! on-disk format and draws a seeded subset.

use smoothcert::data::{load_dataset, DataFormat, DeskFamily, DeskSpec, Split};

fn main() -> smoothcert::Result<()> {
    for family in [DeskFamily::Gratings, DeskFamily::Blobs, DeskFamily::Mixed] {
        let ds = DeskSpec::new(family, 16, 200, 0).generate(Split::Train)?;
        let mean = ds.images.iter().sum::<f32>() / ds.images.len() as f32;
        println!(
            "{:<8} {} images of {}x{}x{}, {} classes, mean pixel {mean:.3}",
            family.to_string(),
            ds.len(),
            ds.channels,
            ds.height,
            ds.width,
            ds.num_classes
        );
    }

    let test = DeskSpec::new(DeskFamily::Gratings, 16, 100, 0).generate(Split::Test)?;
    let path = std::env::temp_dir().join("smoothcert_desk_test.raw");
    test.write_raw(&path)?;
    let back = load_dataset(&path, DataFormat::Raw, Split::Test)?;
    assert_eq!(back, test);
    println!("raw round trip ok: {}", path.display());

    let sub = test.subset(10, 42);
    println!("subset labels {:?}", sub.labels);
    std::fs::remove_file(path)?;
    Ok(())
}
