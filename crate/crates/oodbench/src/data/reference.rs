//! Reference class listings shipped with the crate.
//!
//! The assets mirror the original benchmark's published 266/266 class
//! partition of the 1000 ImageNet synsets. They are inert data: nothing in
//! the pipeline trains on them, but they document the partition shape this
//! artifact generalizes and are covered by cardinality checks.

const IN_DOMAIN: &str = include_str!("../../assets/in_domain_classes.txt");
const OUT_DOMAIN: &str = include_str!("../../assets/out_domain_classes.txt");

/// Synset ids of the reference in-domain classes.
pub fn in_domain_classes() -> Vec<&'static str> {
    IN_DOMAIN.lines().filter(|l| !l.trim().is_empty()).collect()
}

/// Synset ids of the reference out-domain classes.
pub fn out_domain_classes() -> Vec<&'static str> {
    OUT_DOMAIN
        .lines()
        .filter(|l| !l.trim().is_empty())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn both_listings_have_266_entries() {
        assert_eq!(in_domain_classes().len(), 266);
        assert_eq!(out_domain_classes().len(), 266);
    }

    #[test]
    fn listings_are_disjoint_synsets() {
        let in_set: HashSet<_> = in_domain_classes().into_iter().collect();
        let out_set: HashSet<_> = out_domain_classes().into_iter().collect();
        assert_eq!(in_set.len(), 266);
        assert_eq!(out_set.len(), 266);
        assert!(in_set.is_disjoint(&out_set));
    }
}
