use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::datagen::DomainId;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

pub type ClientId = u32;

/// Assignment of source domains to clients.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Partition {
    pub assignments: BTreeMap<ClientId, BTreeSet<DomainId>>,
    pub overlap_ratio: f64,
    pub n_clients: usize,
    pub source_domains: Vec<DomainId>,
    /// Domains placed on two clients.
    pub shared: BTreeSet<DomainId>,
}

impl Partition {
    /// Clients holding `domain`, ascending.
    pub fn holders(&self, domain: DomainId) -> Vec<ClientId> {
        self.assignments
            .iter()
            .filter(|(_, ds)| ds.contains(&domain))
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn domains_of(&self, client: ClientId) -> &BTreeSet<DomainId> {
        &self.assignments[&client]
    }

    pub fn clients(&self) -> impl Iterator<Item = ClientId> + '_ {
        self.assignments.keys().copied()
    }
}

/// Seeded shuffle picks `round(r · n)` shared domains, each placed on two
/// consecutive clients; the remaining domains are dealt one per client,
/// continuing the same round-robin pointer.
pub fn partition_domains(
    sources: &[DomainId],
    n_clients: usize,
    r: f64,
    seed: u64,
) -> Result<Partition> {
    if n_clients == 0 || sources.is_empty() {
        return Err(Error::Config(format!(
            "need at least one client and one source domain, got {n_clients} and {}",
            sources.len()
        )));
    }
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Config(format!("overlap ratio {r} outside [0, 1]")));
    }
    let n = sources.len();
    let n_shared = (r * n as f64).round() as usize;
    let placements = n + n_shared;
    if n_clients > placements {
        return Err(Error::InfeasiblePartition(format!(
            "{n_clients} clients but only {placements} domain placements"
        )));
    }
    if n_shared > 0 && n_clients < 2 {
        return Err(Error::InfeasiblePartition(
            "a shared domain needs two distinct clients".into(),
        ));
    }
    let mut order = sources.to_vec();
    order.sort();
    order.shuffle(&mut rng::seeded(seed, &[stream::PARTITION]));

    let mut assignments: BTreeMap<ClientId, BTreeSet<DomainId>> = (0..n_clients as ClientId)
        .map(|c| (c, BTreeSet::new()))
        .collect();
    let mut next = 0usize;
    let mut place = |d: DomainId, next: &mut usize| {
        let c = (*next % n_clients) as ClientId;
        assignments.get_mut(&c).expect("client exists").insert(d);
        *next += 1;
    };
    for &d in &order[..n_shared] {
        place(d, &mut next);
        place(d, &mut next);
    }
    for &d in &order[n_shared..] {
        place(d, &mut next);
    }
    Ok(Partition {
        assignments,
        overlap_ratio: r,
        n_clients,
        source_domains: sources.to_vec(),
        shared: order[..n_shared].iter().copied().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: u32) -> Vec<DomainId> {
        (0..n).map(DomainId).collect()
    }

    #[test]
    fn no_overlap_gives_one_domain_each() {
        let p = partition_domains(&ids(4), 4, 0.0, 0).unwrap();
        for ds in p.assignments.values() {
            assert_eq!(ds.len(), 1);
        }
        for d in ids(4) {
            assert_eq!(p.holders(d).len(), 1);
        }
    }

    #[test]
    fn half_overlap_on_two_clients() {
        let p = partition_domains(&ids(4), 2, 0.5, 0).unwrap();
        let on_both = ids(4)
            .into_iter()
            .filter(|&d| p.holders(d).len() == 2)
            .count();
        assert_eq!(on_both, 2);
        assert_eq!(p.shared.len(), 2);
        for ds in p.assignments.values() {
            assert_eq!(ds.len(), 3);
        }
    }

    #[test]
    fn single_client_takes_everything() {
        let p = partition_domains(&ids(3), 1, 0.0, 0).unwrap();
        assert_eq!(p.domains_of(0).len(), 3);
    }

    #[test]
    fn too_many_clients_is_infeasible() {
        assert!(matches!(
            partition_domains(&ids(3), 4, 0.0, 0),
            Err(Error::InfeasiblePartition(_))
        ));
        assert!(matches!(
            partition_domains(&ids(3), 1, 0.5, 0),
            Err(Error::InfeasiblePartition(_))
        ));
    }
}
