//! The bid-interaction screen: per-tender min-max normalization and the
//! pairwise graphs it induces.
//!
//! Each tender's bids are mapped onto [0, 1] via
//! `(b - b_min) / (b_max - b_min)`; a reference firm's graph then collects
//! one point per (tender, co-bidder) pair, with the reference's normalized
//! bid on the x-axis and the partner's on the y-axis. Under collusion these
//! points concentrate in specific regions of the unit square; the
//! quadrant-density screen summarizes that concentration directly, and the
//! raster module turns the full graph into a CNN input.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClassLabel, Dataset, Tender};

#[derive(Debug, Error, PartialEq)]
pub enum ScreenError {
    #[error("tender '{0}' is degenerate: all bids equal, min-max transform undefined")]
    DegenerateTender(String),
    #[error("firm '{0}' has no non-degenerate tender with at least one co-bidder")]
    NoEligibleTenders(String),
    #[error("firm '{firm}' spans tenders with mixed class labels (period '{period}')")]
    MixedLabels { firm: String, period: String },
}

/// A bid rescaled to [0, 1] within its tender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedBid {
    pub tender_id: String,
    pub firm_id: String,
    pub value: f64,
}

/// One pairwise interaction: reference firm's normalized bid against a
/// partner's normalized bid in the same tender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionPoint {
    pub x: f64,
    pub y: f64,
    pub partner_firm: String,
    pub tender_id: String,
}

/// All pairwise interactions of one reference firm over one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionGraph {
    pub reference_firm: String,
    pub period_tag: String,
    pub points: Vec<InteractionPoint>,
    pub class_label: ClassLabel,
}

/// Apply the min-max transformation to every bid of a tender.
///
/// Fails with [`ScreenError::DegenerateTender`] when all bids are equal
/// (zero denominator); callers skip such tenders and keep the rest of the
/// firm's history.
pub fn min_max_transform(tender: &Tender) -> Result<Vec<NormalizedBid>, ScreenError> {
    let min = tender.min_bid();
    let max = tender.max_bid();
    if max <= min {
        return Err(ScreenError::DegenerateTender(tender.tender_id.clone()));
    }
    let span = max - min;
    Ok(tender
        .bids
        .iter()
        .map(|b| NormalizedBid {
            tender_id: b.tender_id.clone(),
            firm_id: b.firm_id.clone(),
            value: (b.bid_value - min) / span,
        })
        .collect())
}

/// Build the interaction graph of `reference_firm` over `ds`.
///
/// Every non-degenerate tender in which the reference firm bids contributes
/// one point per co-bidder, regardless of how often that co-bidder appears
/// elsewhere. Degenerate tenders are skipped with a warning. The label is
/// taken from the contributing tenders and must be uniform.
pub fn build_interaction_graph(
    ds: &Dataset,
    reference_firm: &str,
    period_tag: &str,
) -> Result<InteractionGraph, ScreenError> {
    let mut points = Vec::new();
    let mut label: Option<ClassLabel> = None;

    for tender in &ds.tenders {
        if !tender.bids.iter().any(|b| b.firm_id == reference_firm) {
            continue;
        }
        let normalized = match min_max_transform(tender) {
            Ok(n) => n,
            Err(ScreenError::DegenerateTender(id)) => {
                log::warn!("skipping degenerate tender '{id}' for firm '{reference_firm}'");
                continue;
            }
            Err(e) => return Err(e),
        };
        let reference_value = normalized
            .iter()
            .find(|n| n.firm_id == reference_firm)
            .map(|n| n.value)
            .expect("reference firm bid present");

        match label {
            None => label = Some(tender.class_label),
            Some(l) if l != tender.class_label => {
                return Err(ScreenError::MixedLabels {
                    firm: reference_firm.to_string(),
                    period: period_tag.to_string(),
                })
            }
            _ => {}
        }

        for partner in &normalized {
            if partner.firm_id == reference_firm {
                continue;
            }
            points.push(InteractionPoint {
                x: reference_value,
                y: partner.value,
                partner_firm: partner.firm_id.clone(),
                tender_id: tender.tender_id.clone(),
            });
        }
    }

    match label {
        Some(class_label) if !points.is_empty() => Ok(InteractionGraph {
            reference_firm: reference_firm.to_string(),
            period_tag: period_tag.to_string(),
            points,
            class_label,
        }),
        _ => Err(ScreenError::NoEligibleTenders(reference_firm.to_string())),
    }
}

/// Fraction of points in each quadrant of the unit square cut at
/// `(split, split)`, ordered (lower-left, lower-right, upper-left,
/// upper-right). Points on a boundary count toward the lower/left side.
pub fn quadrant_density(g: &InteractionGraph, split: f64) -> [f64; 4] {
    assert!(!g.points.is_empty(), "quadrant_density needs points");
    let mut counts = [0usize; 4];
    for p in &g.points {
        let right = p.x > split;
        let upper = p.y > split;
        let idx = match (upper, right) {
            (false, false) => 0,
            (false, true) => 1,
            (true, false) => 2,
            (true, true) => 3,
        };
        counts[idx] += 1;
    }
    let n = g.points.len() as f64;
    [
        counts[0] as f64 / n,
        counts[1] as f64 / n,
        counts[2] as f64 / n,
        counts[3] as f64 / n,
    ]
}

/// Serialize graphs as one JSON object per line.
pub fn write_graphs_jsonl(graphs: &[InteractionGraph], path: &Path) -> std::io::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for g in graphs {
        serde_json::to_writer(&mut out, g)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_graphs_jsonl(path: &Path) -> std::io::Result<Vec<InteractionGraph>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut graphs = Vec::new();
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        graphs.push(serde_json::from_str(&line)?);
    }
    Ok(graphs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BidRecord;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn tender(id: &str, label: ClassLabel, bids: &[(&str, f64)]) -> Tender {
        let date = NaiveDate::from_ymd_opt(1999, 6, 1).unwrap();
        Tender {
            tender_id: id.to_string(),
            date,
            class_label: label,
            bids: bids
                .iter()
                .map(|(firm, value)| BidRecord {
                    tender_id: id.to_string(),
                    firm_id: firm.to_string(),
                    bid_value: *value,
                    date,
                    region: "r".into(),
                    class_label: label,
                    contract_class: None,
                })
                .collect(),
        }
    }

    fn dataset(tenders: Vec<Tender>) -> Dataset {
        Dataset {
            tenders,
            provenance: "test".into(),
        }
    }

    #[test]
    fn midpoint_maps_to_half() {
        let t = tender("T", ClassLabel::Collusive, &[("A", 100.0), ("B", 150.0), ("C", 200.0)]);
        let n = min_max_transform(&t).unwrap();
        assert_eq!(n[1].value, 0.5);
    }

    #[test]
    fn endpoints_map_to_zero_and_one() {
        let t = tender("T", ClassLabel::Collusive, &[("A", 70.0), ("B", 95.0), ("C", 120.0)]);
        let n = min_max_transform(&t).unwrap();
        assert_eq!(n[0].value, 0.0);
        assert_eq!(n[2].value, 1.0);
        assert_eq!(n.iter().filter(|b| b.value == 0.0).count(), 1);
        assert_eq!(n.iter().filter(|b| b.value == 1.0).count(), 1);
    }

    #[test]
    fn equal_bids_are_degenerate() {
        let t = tender("T7", ClassLabel::Competitive, &[("A", 7.0), ("B", 7.0), ("C", 7.0)]);
        assert_eq!(
            min_max_transform(&t),
            Err(ScreenError::DegenerateTender("T7".into()))
        );
    }

    #[test]
    fn graph_enumerates_all_partner_pairs() {
        let ds = dataset(vec![
            tender("T1", ClassLabel::Collusive, &[("R", 100.0), ("A", 150.0), ("B", 200.0)]),
            tender("T2", ClassLabel::Collusive, &[("R", 90.0), ("A", 120.0)]),
        ]);
        let g = build_interaction_graph(&ds, "R", "all").unwrap();
        let pairs: Vec<(&str, &str)> = g
            .points
            .iter()
            .map(|p| (p.partner_firm.as_str(), p.tender_id.as_str()))
            .collect();
        assert_eq!(pairs, vec![("A", "T1"), ("B", "T1"), ("A", "T2")]);
    }

    #[test]
    fn graph_coordinates_follow_transform() {
        let ds = dataset(vec![tender(
            "T1",
            ClassLabel::Collusive,
            &[("R", 100.0), ("A", 150.0), ("B", 200.0)],
        )]);
        let g = build_interaction_graph(&ds, "R", "all").unwrap();
        assert_eq!((g.points[0].x, g.points[0].y), (0.0, 0.5));
        assert_eq!((g.points[1].x, g.points[1].y), (0.0, 1.0));
    }

    #[test]
    fn lone_bidder_has_no_eligible_tenders() {
        // R appears only in degenerate or partner-free tenders.
        let ds = dataset(vec![
            tender("T1", ClassLabel::Collusive, &[("R", 5.0), ("A", 5.0)]),
            tender("T2", ClassLabel::Collusive, &[("A", 1.0), ("B", 2.0)]),
        ]);
        assert_eq!(
            build_interaction_graph(&ds, "R", "all"),
            Err(ScreenError::NoEligibleTenders("R".into()))
        );
    }

    #[test]
    fn mixed_labels_rejected() {
        let ds = dataset(vec![
            tender("T1", ClassLabel::Collusive, &[("R", 1.0), ("A", 2.0)]),
            tender("T2", ClassLabel::Competitive, &[("R", 1.0), ("A", 2.0)]),
        ]);
        assert!(matches!(
            build_interaction_graph(&ds, "R", "all"),
            Err(ScreenError::MixedLabels { .. })
        ));
    }

    #[test]
    fn degenerate_tenders_skipped_not_fatal() {
        let ds = dataset(vec![
            tender("T1", ClassLabel::Collusive, &[("R", 5.0), ("A", 5.0)]),
            tender("T2", ClassLabel::Collusive, &[("R", 1.0), ("A", 2.0)]),
        ]);
        let g = build_interaction_graph(&ds, "R", "all").unwrap();
        assert_eq!(g.points.len(), 1);
        assert_eq!(g.points[0].tender_id, "T2");
    }

    fn graph_with_points(points: &[(f64, f64)]) -> InteractionGraph {
        InteractionGraph {
            reference_firm: "R".into(),
            period_tag: "all".into(),
            class_label: ClassLabel::Collusive,
            points: points
                .iter()
                .enumerate()
                .map(|(i, &(x, y))| InteractionPoint {
                    x,
                    y,
                    partner_firm: format!("P{i}"),
                    tender_id: format!("T{i}"),
                })
                .collect(),
        }
    }

    #[test]
    fn quadrant_single_mass() {
        let g = graph_with_points(&[(0.9, 0.9), (0.9, 0.9)]);
        assert_eq!(quadrant_density(&g, 0.5), [0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn quadrant_symmetric_split() {
        let g = graph_with_points(&[(0.1, 0.1), (0.9, 0.9)]);
        assert_eq!(quadrant_density(&g, 0.5), [0.5, 0.0, 0.0, 0.5]);
    }

    #[test]
    fn quadrant_boundary_goes_lower_left() {
        let g = graph_with_points(&[(0.5, 0.5)]);
        assert_eq!(quadrant_density(&g, 0.5), [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn graphs_jsonl_round_trip() {
        let graphs = vec![
            graph_with_points(&[(0.0, 1.0), (0.25, 0.75)]),
            graph_with_points(&[(1.0, 0.0)]),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graphs.jsonl");
        write_graphs_jsonl(&graphs, &path).unwrap();
        let back = read_graphs_jsonl(&path).unwrap();
        assert_eq!(back, graphs);
    }

    fn arb_tender() -> impl Strategy<Value = Tender> {
        // 2..6 distinct firms with values on a coarse positive grid so that
        // degenerate (all-equal) tenders occur with non-trivial probability.
        proptest::collection::vec(1u32..30, 2..6).prop_map(|values| {
            tender(
                "T0",
                ClassLabel::Competitive,
                &values
                    .iter()
                    .enumerate()
                    .map(|(i, v)| (Box::leak(format!("F{i}").into_boxed_str()) as &str, f64::from(*v)))
                    .collect::<Vec<_>>(),
            )
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn transform_bounds_and_endpoints(t in arb_tender()) {
            match min_max_transform(&t) {
                Ok(normalized) => {
                    for n in &normalized {
                        prop_assert!((0.0..=1.0).contains(&n.value));
                    }
                    prop_assert!(normalized.iter().any(|n| n.value == 0.0));
                    prop_assert!(normalized.iter().any(|n| n.value == 1.0));
                }
                Err(ScreenError::DegenerateTender(_)) => {
                    let first = t.bids[0].bid_value;
                    prop_assert!(t.bids.iter().all(|b| b.bid_value == first));
                }
                Err(e) => prop_assert!(false, "unexpected error {e:?}"),
            }
        }

        #[test]
        fn transform_is_affine_invariant(t in arb_tender(), scale in 0.25f64..40.0, shift in -0.5f64..5000.0) {
            prop_assume!(t.max_bid() > t.min_bid());
            let mut scaled = t.clone();
            for b in &mut scaled.bids {
                b.bid_value = b.bid_value * scale + shift;
            }
            prop_assume!(scaled.bids.iter().all(|b| b.bid_value > 0.0));
            let a = min_max_transform(&t).unwrap();
            let b = min_max_transform(&scaled).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x.value - y.value).abs() < 1e-9, "{} vs {}", x.value, y.value);
            }
        }

        #[test]
        fn quadrant_density_is_probability_vector(
            pts in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..40),
            split in 0.1f64..0.9,
        ) {
            let g = graph_with_points(&pts);
            let q = quadrant_density(&g, split);
            prop_assert!(q.iter().all(|&v| v >= 0.0));
            prop_assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn point_count_matches_cobidder_sum() {
        let ds = dataset(vec![
            tender("T1", ClassLabel::Collusive, &[("R", 1.0), ("A", 2.0), ("B", 3.0), ("C", 4.0)]),
            tender("T2", ClassLabel::Collusive, &[("R", 1.0), ("A", 2.0)]),
            tender("T3", ClassLabel::Collusive, &[("A", 1.0), ("B", 2.0)]),
        ]);
        let g = build_interaction_graph(&ds, "R", "all").unwrap();
        // (4 - 1) + (2 - 1); T3 has no reference bid.
        assert_eq!(g.points.len(), 4);
    }

    #[test]
    fn exchange_property_swaps_axes() {
        let ds = dataset(vec![
            tender("T1", ClassLabel::Collusive, &[("A", 10.0), ("B", 20.0), ("C", 30.0)]),
            tender("T2", ClassLabel::Collusive, &[("A", 12.0), ("B", 9.0)]),
        ]);
        let ga = build_interaction_graph(&ds, "A", "all").unwrap();
        let gb = build_interaction_graph(&ds, "B", "all").unwrap();
        let a_vs_b: Vec<(f64, f64)> = ga
            .points
            .iter()
            .filter(|p| p.partner_firm == "B")
            .map(|p| (p.x, p.y))
            .collect();
        let b_vs_a: Vec<(f64, f64)> = gb
            .points
            .iter()
            .filter(|p| p.partner_firm == "A")
            .map(|p| (p.y, p.x))
            .collect();
        assert_eq!(a_vs_b, b_vs_a);
        assert!(!a_vs_b.is_empty());
    }
}
