//! Raw procurement bid records, grouped into tenders.
//!
//! Ingest is CSV-only with an explicit column mapping (procurement exports
//! vary too much for inference to be auditable). Datasets are immutable
//! after construction and safe to share across threads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("row {row}: {reason}")]
    Parse { row: usize, reason: String },
    #[error("row {row}: duplicate bid for firm '{firm_id}' in tender '{tender_id}'")]
    DuplicateBid {
        tender_id: String,
        firm_id: String,
        row: usize,
    },
    #[error("dataset contains no usable tenders")]
    EmptyDataset,
}

/// Outcome class of a tender or graph: 1 = cartel, 0 = competition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassLabel {
    Collusive,
    Competitive,
}

impl ClassLabel {
    pub fn as_binary(self) -> u8 {
        match self {
            ClassLabel::Collusive => 1,
            ClassLabel::Competitive => 0,
        }
    }

    pub fn from_binary(v: u8) -> Option<Self> {
        match v {
            1 => Some(ClassLabel::Collusive),
            0 => Some(ClassLabel::Competitive),
            _ => None,
        }
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.as_binary())
    }
}

/// One bid by one firm in one tender.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidRecord {
    pub tender_id: String,
    pub firm_id: String,
    /// Strictly positive, in currency units.
    pub bid_value: f64,
    pub date: NaiveDate,
    pub region: String,
    pub class_label: ClassLabel,
    pub contract_class: Option<String>,
}

/// A procurement auction: at least two bids, all sharing tender id and label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tender {
    pub tender_id: String,
    pub date: NaiveDate,
    pub bids: Vec<BidRecord>,
    pub class_label: ClassLabel,
}

impl Tender {
    pub fn min_bid(&self) -> f64 {
        self.bids.iter().map(|b| b.bid_value).fold(f64::INFINITY, f64::min)
    }

    pub fn max_bid(&self) -> f64 {
        self.bids
            .iter()
            .map(|b| b.bid_value)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub tenders: Vec<Tender>,
    pub provenance: String,
}

impl Dataset {
    pub fn total_bids(&self) -> usize {
        self.tenders.iter().map(|t| t.bids.len()).sum()
    }
}

/// Maps the canonical field names onto CSV column headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub tender_id: String,
    pub firm_id: String,
    pub bid_value: String,
    pub date: String,
    pub region: String,
    pub class_label: String,
    pub contract_class: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        ColumnMap {
            tender_id: "tender_id".into(),
            firm_id: "firm_id".into(),
            bid_value: "bid_value".into(),
            date: "date".into(),
            region: "region".into(),
            class_label: "class_label".into(),
            contract_class: Some("contract_class".into()),
        }
    }
}

/// How tenders are grouped into analysis periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeriodPolicy {
    WholePeriod,
    Yearly,
}

/// Parse a CSV file into a [`Dataset`] grouped by tender id.
///
/// Requirements: UTF-8, header row, ISO-8601 dates, decimal point ".",
/// class label "1" (collusive) or "0" (competitive). Bid values must be
/// strictly positive; a duplicate (tender, firm) pair is an error. Tenders
/// with a single bid carry no pairwise information and are dropped with a
/// warning.
pub fn ingest_csv(path: &Path, columns: &ColumnMap) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let provenance = path.display().to_string();
    ingest_reader(file, columns, provenance)
}

/// Same contract as [`ingest_csv`], reading from any source.
pub fn ingest_reader(
    reader: impl std::io::Read,
    columns: &ColumnMap,
    provenance: String,
) -> Result<Dataset, DataError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Parse {
                row: 1,
                reason: format!("missing mapped column '{name}'"),
            })
    };

    let idx_tender = col(&columns.tender_id)?;
    let idx_firm = col(&columns.firm_id)?;
    let idx_value = col(&columns.bid_value)?;
    let idx_date = col(&columns.date)?;
    let idx_region = col(&columns.region)?;
    let idx_label = col(&columns.class_label)?;
    let idx_class = match &columns.contract_class {
        Some(name) => headers.iter().position(|h| h == name),
        None => None,
    };

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<BidRecord>> = HashMap::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();

    for (i, record) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, after the header
        let record = record?;
        let field = |idx: usize, name: &str| -> Result<&str, DataError> {
            record.get(idx).ok_or_else(|| DataError::Parse {
                row,
                reason: format!("missing value for column '{name}'"),
            })
        };

        let tender_id = field(idx_tender, "tender_id")?.trim().to_string();
        let firm_id = field(idx_firm, "firm_id")?.trim().to_string();
        if tender_id.is_empty() || firm_id.is_empty() {
            return Err(DataError::Parse {
                row,
                reason: "empty tender_id or firm_id".into(),
            });
        }

        let raw_value = field(idx_value, "bid_value")?.trim();
        let bid_value: f64 = raw_value.parse().map_err(|_| DataError::Parse {
            row,
            reason: format!("bid_value '{raw_value}' is not a decimal number"),
        })?;
        if !bid_value.is_finite() || bid_value <= 0.0 {
            return Err(DataError::Parse {
                row,
                reason: format!("bid_value '{raw_value}' must be strictly positive"),
            });
        }

        let raw_date = field(idx_date, "date")?.trim();
        let date = NaiveDate::parse_from_str(raw_date, "%Y-%m-%d").map_err(|_| {
            DataError::Parse {
                row,
                reason: format!("date '{raw_date}' is not ISO-8601 (YYYY-MM-DD)"),
            }
        })?;

        let raw_label = field(idx_label, "class_label")?.trim();
        let class_label = match raw_label {
            "1" => ClassLabel::Collusive,
            "0" => ClassLabel::Competitive,
            other => {
                return Err(DataError::Parse {
                    row,
                    reason: format!("class_label '{other}' must be 1 or 0"),
                })
            }
        };

        let region = field(idx_region, "region")?.trim().to_string();
        let contract_class = idx_class
            .and_then(|idx| record.get(idx))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);

        let key = (tender_id.clone(), firm_id.clone());
        if let Some(prev) = seen.get(&key) {
            log::debug!("duplicate bid first seen at row {prev}");
            return Err(DataError::DuplicateBid {
                tender_id,
                firm_id,
                row,
            });
        }
        seen.insert(key, row);

        if let Some(existing) = groups.get(&tender_id) {
            if existing[0].class_label != class_label {
                return Err(DataError::Parse {
                    row,
                    reason: format!(
                        "class_label for tender '{tender_id}' differs from earlier rows"
                    ),
                });
            }
        } else {
            order.push(tender_id.clone());
        }

        groups.entry(tender_id).or_default().push(BidRecord {
            tender_id: String::new(), // filled below from the group key
            firm_id,
            bid_value,
            date,
            region,
            class_label,
            contract_class,
        });
    }

    let mut tenders = Vec::with_capacity(order.len());
    for tender_id in order {
        let mut bids = groups.remove(&tender_id).unwrap();
        for b in &mut bids {
            b.tender_id = tender_id.clone();
        }
        if bids.len() < 2 {
            log::warn!("dropping tender '{tender_id}': fewer than 2 bids");
            continue;
        }
        tenders.push(Tender {
            tender_id,
            date: bids[0].date,
            class_label: bids[0].class_label,
            bids,
        });
    }

    if tenders.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    Ok(Dataset {
        tenders,
        provenance,
    })
}

/// Write a dataset back out in the canonical column layout; re-ingesting the
/// file reproduces the dataset field for field.
pub fn export_csv(ds: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = std::fs::File::create(path)?;
    export_writer(ds, file)
}

pub fn export_writer(ds: &Dataset, writer: impl std::io::Write) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record([
        "tender_id",
        "firm_id",
        "bid_value",
        "date",
        "region",
        "class_label",
        "contract_class",
    ])?;
    for tender in &ds.tenders {
        for bid in &tender.bids {
            wtr.write_record([
                bid.tender_id.as_str(),
                bid.firm_id.as_str(),
                &bid.bid_value.to_string(),
                &bid.date.format("%Y-%m-%d").to_string(),
                bid.region.as_str(),
                &bid.class_label.to_string(),
                bid.contract_class.as_deref().unwrap_or(""),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Firms with at least `min_bids` bids in the dataset, sorted lexicographically.
pub fn eligible_reference_firms(ds: &Dataset, min_bids: usize) -> Vec<String> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for tender in &ds.tenders {
        for bid in &tender.bids {
            *counts.entry(bid.firm_id.as_str()).or_default() += 1;
        }
    }
    let mut firms: Vec<String> = counts
        .into_iter()
        .filter(|&(_, n)| n >= min_bids)
        .map(|(f, _)| f.to_string())
        .collect();
    firms.sort();
    firms
}

/// Split a dataset into analysis periods. Yearly groups tenders by the
/// calendar year of the tender date; years with no tenders produce no
/// partition. Partitions are disjoint and cover the input.
pub fn partition_periods(ds: &Dataset, policy: PeriodPolicy) -> Vec<(String, Dataset)> {
    match policy {
        PeriodPolicy::WholePeriod => vec![("all".to_string(), ds.clone())],
        PeriodPolicy::Yearly => {
            let mut years: Vec<i32> = ds.tenders.iter().map(|t| t.date.year()).collect();
            years.sort_unstable();
            years.dedup();
            years
                .into_iter()
                .map(|year| {
                    let tenders: Vec<Tender> = ds
                        .tenders
                        .iter()
                        .filter(|t| t.date.year() == year)
                        .cloned()
                        .collect();
                    (
                        year.to_string(),
                        Dataset {
                            tenders,
                            provenance: ds.provenance.clone(),
                        },
                    )
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HEADER: &str = "tender_id,firm_id,bid_value,date,region,class_label,contract_class";

    fn ingest_str(csv: &str) -> Result<Dataset, DataError> {
        ingest_reader(csv.as_bytes(), &ColumnMap::default(), "test".into())
    }

    #[test]
    fn groups_rows_into_tenders() {
        let csv = format!(
            "{HEADER}\n\
             T1,FirmA,100,1999-03-01,ticino,1,\n\
             T1,FirmB,150,1999-03-01,ticino,1,\n\
             T2,FirmA,200,1999-04-01,ticino,1,\n\
             T2,FirmC,250,1999-04-01,ticino,1,\n"
        );
        let ds = ingest_str(&csv).unwrap();
        assert_eq!(ds.tenders.len(), 2);
        assert_eq!(ds.tenders[0].bids.len(), 2);
        assert_eq!(ds.tenders[1].bids.len(), 2);
        assert_eq!(ds.tenders[0].tender_id, "T1");
    }

    #[test]
    fn negative_bid_is_parse_error() {
        let csv = format!(
            "{HEADER}\n\
             T1,FirmA,-5,1999-03-01,r,1,\n\
             T1,FirmB,150,1999-03-01,r,1,\n"
        );
        match ingest_str(&csv) {
            Err(DataError::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected ParseError, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_firm_in_tender_rejected() {
        let csv = format!(
            "{HEADER}\n\
             T1,FirmA,100,1999-03-01,r,1,\n\
             T1,FirmA,150,1999-03-01,r,1,\n"
        );
        match ingest_str(&csv) {
            Err(DataError::DuplicateBid {
                tender_id, firm_id, ..
            }) => {
                assert_eq!(tender_id, "T1");
                assert_eq!(firm_id, "FirmA");
            }
            other => panic!("expected DuplicateBid, got {other:?}"),
        }
    }

    #[test]
    fn header_only_is_empty_dataset() {
        assert!(matches!(
            ingest_str(&format!("{HEADER}\n")),
            Err(DataError::EmptyDataset)
        ));
    }

    #[test]
    fn mixed_labels_within_tender_rejected() {
        let csv = format!(
            "{HEADER}\n\
             T1,FirmA,100,1999-03-01,r,1,\n\
             T1,FirmB,150,1999-03-01,r,0,\n"
        );
        assert!(matches!(ingest_str(&csv), Err(DataError::Parse { row: 3, .. })));
    }

    #[test]
    fn single_bid_tender_dropped() {
        let csv = format!(
            "{HEADER}\n\
             T1,FirmA,100,1999-03-01,r,1,\n\
             T2,FirmA,100,1999-03-01,r,1,\n\
             T2,FirmB,120,1999-03-01,r,1,\n"
        );
        let ds = ingest_str(&csv).unwrap();
        assert_eq!(ds.tenders.len(), 1);
        assert_eq!(ds.tenders[0].tender_id, "T2");
    }

    #[test]
    fn custom_column_mapping() {
        let csv = "auction,bidder,price,when,canton,cartel\n\
                   T1,A,100,2001-05-02,zh,0\n\
                   T1,B,130,2001-05-02,zh,0\n";
        let map = ColumnMap {
            tender_id: "auction".into(),
            firm_id: "bidder".into(),
            bid_value: "price".into(),
            date: "when".into(),
            region: "canton".into(),
            class_label: "cartel".into(),
            contract_class: None,
        };
        let ds = ingest_reader(csv.as_bytes(), &map, "t".into()).unwrap();
        assert_eq!(ds.tenders[0].bids[0].firm_id, "A");
        assert_eq!(ds.tenders[0].class_label, ClassLabel::Competitive);
        assert_eq!(ds.tenders[0].bids[0].contract_class, None);
    }

    #[test]
    fn missing_mapped_column_reported() {
        let csv = "tender_id,firm_id,bid_value,date,class_label\nT1,A,1,1999-01-01,1\n";
        let err = ingest_str(csv).unwrap_err();
        assert!(err.to_string().contains("region"), "{err}");
    }

    fn fixture() -> Dataset {
        let csv = format!(
            "{HEADER}\n\
             T1,A,100,1999-03-01,r,1,A+\n\
             T1,B,150,1999-03-01,r,1,A+\n\
             T2,A,90,2000-06-01,r,1,\n\
             T2,C,140,2000-06-01,r,1,\n\
             T3,B,200,2000-07-01,r,1,\n\
             T3,C,210,2000-07-01,r,1,\n"
        );
        ingest_str(&csv).unwrap()
    }

    #[test]
    fn eligibility_threshold_boundary() {
        let ds = fixture();
        // A and B and C each have 2 bids.
        assert_eq!(eligible_reference_firms(&ds, 2), vec!["A", "B", "C"]);
        assert_eq!(eligible_reference_firms(&ds, 3), Vec::<String>::new());
        let firm_counts = |f: &str| {
            ds.tenders
                .iter()
                .flat_map(|t| &t.bids)
                .filter(|b| b.firm_id == f)
                .count()
        };
        assert_eq!(firm_counts("A"), 2);
    }

    #[test]
    fn eligibility_degenerate_threshold_returns_all() {
        let ds = fixture();
        assert_eq!(eligible_reference_firms(&ds, 1).len(), 3);
    }

    #[test]
    fn eligibility_is_monotone_in_threshold() {
        let ds = fixture();
        let mut prev = eligible_reference_firms(&ds, 0);
        for min_bids in 1..6 {
            let cur = eligible_reference_firms(&ds, min_bids);
            assert!(cur.iter().all(|f| prev.contains(f)));
            prev = cur;
        }
    }

    #[test]
    fn yearly_partition_groups_by_calendar_year() {
        let ds = fixture();
        let parts = partition_periods(&ds, PeriodPolicy::Yearly);
        assert_eq!(parts.len(), 2);
        assert_eq!(parts[0].0, "1999");
        assert_eq!(parts[0].1.tenders.len(), 1);
        assert_eq!(parts[1].0, "2000");
        assert_eq!(parts[1].1.tenders.len(), 2);
    }

    #[test]
    fn whole_period_is_identity() {
        let ds = fixture();
        let parts = partition_periods(&ds, PeriodPolicy::WholePeriod);
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].1, ds);
    }

    #[test]
    fn partition_union_covers_input_disjointly() {
        let ds = fixture();
        let parts = partition_periods(&ds, PeriodPolicy::Yearly);
        let mut seen: Vec<&str> = Vec::new();
        for (_, part) in &parts {
            for t in &part.tenders {
                assert!(!seen.contains(&t.tender_id.as_str()), "overlap");
                seen.push(&t.tender_id);
            }
        }
        assert_eq!(seen.len(), ds.tenders.len());
    }

    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        // Tenders of 2..5 bids, distinct firms, positive values, plain ids.
        let bid = (1u32..1_000_000, 0i64..2000).prop_map(|(v, day_off)| {
            let date = NaiveDate::from_ymd_opt(1999, 1, 1).unwrap()
                + chrono::Duration::days(day_off);
            (f64::from(v) / 100.0 + 0.01, date)
        });
        let tender = (proptest::collection::vec(bid, 2..5), any::<bool>());
        proptest::collection::vec(tender, 1..6).prop_map(|tenders| Dataset {
            provenance: "prop".into(),
            tenders: tenders
                .into_iter()
                .enumerate()
                .map(|(ti, (bids, collusive))| {
                    let label = if collusive {
                        ClassLabel::Collusive
                    } else {
                        ClassLabel::Competitive
                    };
                    let date = bids[0].1;
                    Tender {
                        tender_id: format!("T{ti}"),
                        date,
                        class_label: label,
                        bids: bids
                            .into_iter()
                            .enumerate()
                            .map(|(fi, (value, _))| BidRecord {
                                tender_id: format!("T{ti}"),
                                firm_id: format!("F{fi}"),
                                bid_value: value,
                                date,
                                region: "prop-region".into(),
                                class_label: label,
                                contract_class: if fi % 2 == 0 {
                                    Some("A".into())
                                } else {
                                    None
                                },
                            })
                            .collect(),
                    }
                })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip_is_identity(ds in arb_dataset()) {
            let mut buf = Vec::new();
            export_writer(&ds, &mut buf).unwrap();
            let back = ingest_reader(buf.as_slice(), &ColumnMap::default(), ds.provenance.clone()).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn partitions_are_a_partition(ds in arb_dataset()) {
            let parts = partition_periods(&ds, PeriodPolicy::Yearly);
            let total: usize = parts.iter().map(|(_, d)| d.tenders.len()).sum();
            prop_assert_eq!(total, ds.tenders.len());
            for (tag, part) in &parts {
                prop_assert!(!part.tenders.is_empty());
                for t in &part.tenders {
                    prop_assert_eq!(&t.date.year().to_string(), tag);
                }
            }
        }
    }
}
