//! Dataset-level counts and type frequency tables.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::model::AnnotationRecord;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeFrequency {
    pub label: String,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub documents: usize,
    pub entities: usize,
    /// Distinct entity type labels, compared exactly.
    pub entity_types: usize,
    pub triples: usize,
    pub relation_types: usize,
    pub top_entity_types: Vec<TypeFrequency>,
    pub top_relation_types: Vec<TypeFrequency>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yield_percent: Option<f64>,
}

/// Most frequent first, ties by label.
fn top(counts: HashMap<&str, usize>, k: usize) -> Vec<TypeFrequency> {
    let mut rows: Vec<TypeFrequency> = counts
        .into_iter()
        .map(|(label, count)| TypeFrequency {
            label: label.to_string(),
            count,
        })
        .collect();
    rows.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.label.cmp(&b.label)));
    rows.truncate(k);
    rows
}

impl DatasetStats {
    /// Entity types are counted once per entity, relation types once per
    /// triple. `attempts` adds a yield relative to the records given.
    pub fn compute(records: &[AnnotationRecord], top_k: usize, attempts: Option<usize>) -> Self {
        let mut entity_counts: HashMap<&str, usize> = HashMap::new();
        let mut relation_counts: HashMap<&str, usize> = HashMap::new();
        for record in records {
            for e in &record.entities {
                *entity_counts.entry(e.type_label.as_str()).or_default() += 1;
            }
            for t in &record.triples {
                *relation_counts.entry(t.predicate.as_str()).or_default() += 1;
            }
        }
        DatasetStats {
            documents: records.len(),
            entities: entity_counts.values().sum(),
            entity_types: entity_counts.len(),
            triples: relation_counts.values().sum(),
            relation_types: relation_counts.len(),
            top_entity_types: top(entity_counts, top_k),
            top_relation_types: top(relation_counts, top_k),
            yield_percent: attempts
                .filter(|a| *a > 0)
                .map(|a| 100.0 * records.len() as f64 / a as f64),
        }
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "documents       {}", self.documents);
        let _ = writeln!(out, "entities        {}", self.entities);
        let _ = writeln!(out, "entity types    {}", self.entity_types);
        let _ = writeln!(out, "triples         {}", self.triples);
        let _ = writeln!(out, "relation types  {}", self.relation_types);
        if let Some(y) = self.yield_percent {
            let _ = writeln!(out, "yield           {y:.2}%");
        }
        for (title, rows) in [
            ("top entity types", &self.top_entity_types),
            ("top relation types", &self.top_relation_types),
        ] {
            let _ = writeln!(out, "\n{title}");
            let width = rows.iter().map(|r| r.label.chars().count()).max().unwrap_or(0);
            for r in rows {
                let _ = writeln!(out, "  {:<width$}  {}", r.label, r.count);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> AnnotationRecord {
        serde_json::from_str(include_str!("../tests/fixtures/sample_record.json")).unwrap()
    }

    #[test]
    fn sample_record_counts() {
        let stats = DatasetStats::compute(&[sample()], 30, None);
        assert_eq!(
            (stats.documents, stats.entities, stats.entity_types, stats.triples, stats.relation_types),
            (1, 6, 5, 4, 3)
        );
        assert_eq!(stats.top_entity_types[0], TypeFrequency { label: "Person".into(), count: 2 });
        assert_eq!(stats.top_relation_types[0], TypeFrequency { label: "located_in".into(), count: 2 });
        let labels: Vec<_> = stats.top_relation_types.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, vec!["located_in", "founded_by", "home_of"]);
    }

    #[test]
    fn empty_and_summed() {
        let empty = DatasetStats::compute(&[], 30, None);
        assert_eq!((empty.documents, empty.entities, empty.entity_types, empty.triples), (0, 0, 0, 0));
        let twice = DatasetStats::compute(&[sample(), sample()], 2, Some(4));
        assert_eq!(twice.top_entity_types[0].count, 4);
        assert_eq!(twice.top_entity_types.len(), 2);
        assert_eq!(twice.entity_types, 5);
        assert_eq!(twice.yield_percent, Some(50.0));
    }
}
