// Spread source domains over clients, with and without shared domains.
//
// ```sh
// cargo run --example partition_clients
// ```

use feddspg::datagen::{self, DomainId, GenSpec};
use feddspg::fed::{client_data, partition_domains};

pub fn run_example() -> feddspg::Result<()> {
    let ds = datagen::gen_dataset(&GenSpec {
        domains: 6,
        ..GenSpec::default()
    })?;
    // Domain 0 is held out; the rest are sources.
    let sources: Vec<DomainId> = ds.domain_ids()[1..].to_vec();
    for overlap in [0.0, 0.4] {
        let p = partition_domains(&sources, 4, overlap, 0)?;
        println!("overlap {overlap}: shared {:?}", p.shared);
        for c in client_data(&ds, &p, 0)? {
            println!(
                "  client {} holds {:?} with {} samples",
                c.id,
                c.domains,
                c.samples.len()
            );
        }
    }
    match partition_domains(&sources, 9, 0.0, 0) {
        Err(e) => println!("9 clients for 5 domains: {e}"),
        Ok(_) => unreachable!("more clients than domain slots"),
    }
    Ok(())
}

fn main() -> feddspg::Result<()> {
    run_example()
}
