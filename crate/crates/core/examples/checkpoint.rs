// Write a parameter message to disk, read it back and catch a flipped bit.
//
// ```sh
// cargo run --example checkpoint
// ```

use feddspg::fed::ParamMessage;
use feddspg::numcore::Tensor;
use feddspg::{rng, Error};

pub fn run_example() -> feddspg::Result<()> {
    let mut r = rng::seeded(5, &[]);
    let msg = ParamMessage::new(
        3,
        12,
        vec![
            ("v".into(), Tensor::randn(4, 8, 1.0, &mut r)),
            ("u/1".into(), Tensor::randn(4, 8, 1.0, &mut r)),
            ("G/l0.w".into(), Tensor::randn(16, 8, 1.0, &mut r)),
        ],
    )?;
    let path = std::env::temp_dir().join(format!("fdspg-ckpt-{}.bin", std::process::id()));
    msg.write(&path)?;
    let back = ParamMessage::read(&path)?;
    assert_eq!(back, msg);
    println!(
        "{} bytes, names {:?}",
        msg.to_bytes().len(),
        back.names().collect::<Vec<_>>()
    );

    let mut bytes = std::fs::read(&path).map_err(|e| Error::Malformed(e.to_string()))?;
    bytes[40] ^= 0x08;
    match ParamMessage::from_bytes(&bytes) {
        Err(e @ Error::Checksum { .. }) => println!("corrupted copy rejected: {e}"),
        other => panic!("corruption went unnoticed: {other:?}"),
    }
    std::fs::remove_file(&path).ok();
    Ok(())
}

fn main() -> feddspg::Result<()> {
    run_example()
}
