//! Final class list: named connected components.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::taxonomy::{NodeId, TaxonomyForest};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u32,
    pub name: String,
    pub members: Vec<NodeId>,
}

/// Partition of all trims into visual classes. Serializes as
/// `{"classes":[{"id":..,"name":..,"members":[..]}]}`, members sorted and
/// classes sorted by name.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassList {
    pub classes: Vec<ClassEntry>,
}

impl ClassList {
    pub fn from_components(components: Vec<Vec<NodeId>>, forest: &TaxonomyForest) -> Self {
        let mut named: Vec<(String, Vec<NodeId>)> = components
            .into_iter()
            .filter(|c| !c.is_empty())
            .map(|mut c| {
                c.sort();
                c.dedup();
                (canonical_name(&c, forest), c)
            })
            .collect();
        named.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1[0].cmp(&b.1[0])));
        let classes = named
            .into_iter()
            .enumerate()
            .map(|(i, (name, members))| ClassEntry {
                id: i as u32,
                name,
                members,
            })
            .collect();
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Member sets only, for comparison against other partitions.
    pub fn member_sets(&self) -> Vec<BTreeSet<NodeId>> {
        self.classes
            .iter()
            .map(|c| c.members.iter().copied().collect())
            .collect()
    }

    pub fn class_of(&self, id: NodeId) -> Option<&ClassEntry> {
        self.classes.iter().find(|c| c.members.binary_search(&id).is_ok())
    }

    /// Pretty JSON with a trailing newline; stable across runs.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("class list serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }
}

/// `"<minYear>-<maxYear> <Make> <Model> <body> <trims>"` with trims sorted,
/// deduplicated and comma-joined. A single-year class prints one year.
pub fn canonical_name(members: &[NodeId], forest: &TaxonomyForest) -> String {
    let nodes: Vec<_> = members.iter().filter_map(|id| forest.node(*id)).collect();
    let Some(first) = nodes.iter().min_by_key(|n| n.id) else {
        return String::new();
    };
    let min_year = nodes.iter().map(|n| n.year).min().unwrap_or(first.year);
    let max_year = nodes.iter().map(|n| n.year).max().unwrap_or(first.year);
    let years = if min_year == max_year {
        min_year.to_string()
    } else {
        format!("{min_year}-{max_year}")
    };
    let trims: BTreeSet<&str> = nodes.iter().map(|n| n.trim.as_str()).collect();
    let trims: Vec<&str> = trims.into_iter().collect();
    format!(
        "{years} {} {} {} {}",
        first.make,
        first.model,
        first.body,
        trims.join(",")
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::RawTrimRecord;

    fn malibu() -> TaxonomyForest {
        let mut recs = Vec::new();
        for (y, t) in [
            (2008, "ls"),
            (2008, "lt"),
            (2009, "base"),
            (2009, "ls"),
            (2010, "fleet"),
            (2010, "lt"),
        ] {
            recs.push(RawTrimRecord::new("Chevrolet", "Malibu", "sedan", y, t).with_images(["i"]));
        }
        TaxonomyForest::load(recs).unwrap()
    }

    #[test]
    fn multi_year_name() {
        let f = malibu();
        let all: Vec<NodeId> = f.ids().collect();
        assert_eq!(
            canonical_name(&all, &f),
            "2008-2010 Chevrolet Malibu sedan base,fleet,ls,lt"
        );
    }

    #[test]
    fn single_year_names() {
        let f = TaxonomyForest::load(vec![
            RawTrimRecord::new("Honda", "Accord", "sedan", 2010, "lx").with_images(["a"]),
            RawTrimRecord::new("Honda", "Accord", "sedan", 2010, "ex").with_images(["b"]),
        ])
        .unwrap();
        assert_eq!(canonical_name(&[NodeId(0)], &f), "2010 Honda Accord sedan lx");
        assert_eq!(
            canonical_name(&[NodeId(0), NodeId(1)], &f),
            "2010 Honda Accord sedan ex,lx"
        );
    }

    #[test]
    fn export_is_sorted_by_name() {
        let f = malibu();
        let list = ClassList::from_components(
            vec![vec![NodeId(5), NodeId(1)], vec![NodeId(0)], vec![NodeId(2), NodeId(3), NodeId(4)]],
            &f,
        );
        let names: Vec<&str> = list.classes.iter().map(|c| c.name.as_str()).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(list.classes.iter().map(|c| c.id).collect::<Vec<_>>(), vec![0, 1, 2]);
        let lt = list.class_of(NodeId(5)).unwrap();
        assert_eq!(lt.members, vec![NodeId(1), NodeId(5)]);
        assert_eq!(lt.name, "2008-2010 Chevrolet Malibu sedan lt");
        let json = list.to_json();
        assert!(json.starts_with("{\n  \"classes\": ["));
        assert_eq!(ClassList::from_json(&json).unwrap(), list);
    }
}
