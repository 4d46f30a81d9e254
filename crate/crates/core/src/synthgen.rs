//! Synthetic procurement markets with known ground truth.
//!
//! Competitive tenders draw independent bids around a per-tender cost level.
//! Cover-bidding tenders designate a winner by rotation; the winner bids
//! near cost and every other participant places a cover bid a fixed gap
//! above the winner with a small mutual spread. After min-max normalization
//! this produces the collusive signature the screen looks for: a large gap
//! between the two lowest bids, compressed losing bids near the top of the
//! unit interval, and an empty lower-left quadrant in interaction graphs.

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{BidRecord, ClassLabel, Dataset, Tender};
use crate::raster::{rasterize, GrayscaleImage, RasterConfig};
use crate::screen::{build_interaction_graph, InteractionGraph, ScreenError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid market config: {0}")]
    Config(String),
    #[error(transparent)]
    Screen(#[from] ScreenError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Competitive,
    CoverBidding,
}

impl Regime {
    pub fn label(self) -> ClassLabel {
        match self {
            Regime::Competitive => ClassLabel::Competitive,
            Regime::CoverBidding => ClassLabel::Collusive,
        }
    }
}

/// Parameters of one synthetic market.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketConfig {
    pub n_firms: usize,
    pub n_tenders: usize,
    /// Inclusive (min, max) bidders per tender.
    pub bidders_per_tender: (usize, usize),
    /// Uniform (min, max) of the per-tender cost level.
    pub base_cost_range: (f64, f64),
    pub regime: Regime,
    /// Cover bids sit this fraction above the designated winner's bid.
    pub cover_gap: f64,
    /// Mutual spread of cover bids, as a fraction of the winner's bid.
    pub cover_spread: f64,
    /// Competitive bids draw from cost * (1 + U(0, bid_jitter)).
    pub bid_jitter: f64,
    /// Designated winners bid cost * (1 + U(-w, w)).
    pub winner_jitter: f64,
    /// Region / source tag carried onto records and manifests.
    pub tag: String,
    pub seed: u64,
}

impl MarketConfig {
    pub fn defaults(regime: Regime, seed: u64) -> Self {
        MarketConfig {
            n_firms: 12,
            n_tenders: 60,
            bidders_per_tender: (4, 8),
            base_cost_range: (1.0e5, 1.0e6),
            regime,
            cover_gap: 0.15,
            cover_spread: 0.05,
            bid_jitter: 0.10,
            winner_jitter: 0.02,
            tag: "synth".into(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let (lo, hi) = self.bidders_per_tender;
        if lo < 2 || lo > hi || hi > self.n_firms {
            return Err(SynthError::Config(format!(
                "bidders_per_tender ({lo}, {hi}) must satisfy 2 <= min <= max <= n_firms ({})",
                self.n_firms
            )));
        }
        if self.n_tenders == 0 {
            return Err(SynthError::Config("n_tenders must be >= 1".into()));
        }
        if !(self.cover_gap > self.cover_spread && self.cover_spread > 0.0) {
            return Err(SynthError::Config(format!(
                "require cover_gap ({}) > cover_spread ({}) > 0",
                self.cover_gap, self.cover_spread
            )));
        }
        let (cmin, cmax) = self.base_cost_range;
        if !(cmin > 0.0 && cmax > cmin) {
            return Err(SynthError::Config(
                "base_cost_range must be positive and ascending".into(),
            ));
        }
        if self.bid_jitter <= 0.0 || self.winner_jitter <= 0.0 || self.winner_jitter >= 1.0 {
            return Err(SynthError::Config(
                "bid_jitter and winner_jitter must be positive (winner_jitter < 1)".into(),
            ));
        }
        Ok(())
    }
}

fn firm_id(i: usize) -> String {
    format!("F{i:02}")
}

/// Generate one labeled market. Deterministic for a given config.
pub fn generate(cfg: &MarketConfig) -> Result<Dataset, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let label = cfg.regime.label();
    let start = NaiveDate::from_ymd_opt(2000, 1, 1).unwrap();
    let mut tenders = Vec::with_capacity(cfg.n_tenders);

    for t in 0..cfg.n_tenders {
        let tender_id = format!("T{t:05}");
        let date = start + chrono::Duration::days(t as i64);
        let size = rng.gen_range(cfg.bidders_per_tender.0..=cfg.bidders_per_tender.1);
        let cost = rng.gen_range(cfg.base_cost_range.0..cfg.base_cost_range.1);

        // Rotation designates the winner among all cartel members; under
        // competition the same slot is just another participant.
        let designated = t % cfg.n_firms;
        let mut others: Vec<usize> = (0..cfg.n_firms).filter(|&f| f != designated).collect();
        others.shuffle(&mut rng);
        let mut participants: Vec<usize> = std::iter::once(designated)
            .chain(others.into_iter().take(size - 1))
            .collect();
        participants.sort_unstable();

        let mut bids = Vec::with_capacity(size);
        match cfg.regime {
            Regime::Competitive => {
                for &f in &participants {
                    let value = cost * (1.0 + rng.gen_range(0.0..cfg.bid_jitter));
                    bids.push((f, value));
                }
            }
            Regime::CoverBidding => {
                let winner_bid =
                    cost * (1.0 + rng.gen_range(-cfg.winner_jitter..cfg.winner_jitter));
                for &f in &participants {
                    let value = if f == designated {
                        winner_bid
                    } else {
                        winner_bid * (1.0 + cfg.cover_gap + rng.gen_range(0.0..cfg.cover_spread))
                    };
                    bids.push((f, value));
                }
            }
        }

        tenders.push(Tender {
            tender_id: tender_id.clone(),
            date,
            class_label: label,
            bids: bids
                .into_iter()
                .map(|(f, value)| BidRecord {
                    tender_id: tender_id.clone(),
                    firm_id: firm_id(f),
                    bid_value: value,
                    date,
                    region: cfg.tag.clone(),
                    class_label: label,
                    contract_class: None,
                })
                .collect(),
        });
    }

    Ok(Dataset {
        tenders,
        provenance: format!("synthgen:{}:{}", cfg.tag, cfg.seed),
    })
}

/// A corpus request: draw exactly `graphs` interaction graphs from
/// replicated markets under one config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub config: MarketConfig,
    pub graphs: usize,
}

/// One rasterized corpus item.
#[derive(Debug, Clone)]
pub struct CorpusImage {
    pub image: GrayscaleImage,
    pub label: ClassLabel,
    pub source: String,
}

/// Reference firms need at least this many bids before their graph counts.
pub const DEFAULT_MIN_BIDS: usize = 10;

/// Build the full labeled image corpus for a list of specs.
///
/// Markets are replicated per spec (seed offset by market index) until the
/// requested graph count is reached; eligible reference firms are processed
/// in lexicographic order so the corpus is deterministic. Graphs, then
/// images, appear in spec order.
pub fn generate_corpus(
    specs: &[CorpusSpec],
    raster_cfg: &RasterConfig,
    min_bids: usize,
) -> Result<Vec<CorpusImage>, SynthError> {
    if specs.is_empty() {
        return Err(SynthError::Config("corpus spec list is empty".into()));
    }
    for spec in specs {
        spec.config.validate()?;
        if spec.graphs == 0 {
            return Err(SynthError::Config("requested graph count is zero".into()));
        }
    }
    raster_cfg
        .validate()
        .map_err(|e| SynthError::Config(e.to_string()))?;

    let graphs = generate_corpus_graphs(specs, min_bids)?;
    Ok(graphs
        .into_iter()
        .map(|(g, source)| {
            let label = g.class_label;
            CorpusImage {
                image: rasterize(&g, raster_cfg),
                label,
                source,
            }
        })
        .collect())
}

/// The graph stage of [`generate_corpus`], exposed for screens that work on
/// points rather than pixels.
pub fn generate_corpus_graphs(
    specs: &[CorpusSpec],
    min_bids: usize,
) -> Result<Vec<(InteractionGraph, String)>, SynthError> {
    let mut out = Vec::new();
    for spec in specs {
        let mut collected = 0usize;
        let mut market = 0u64;
        while collected < spec.graphs {
            if market >= 10_000 {
                return Err(SynthError::Config(format!(
                    "config '{}' yields too few eligible graphs per market",
                    spec.config.tag
                )));
            }
            let mut cfg = spec.config.clone();
            cfg.seed = spec.config.seed.wrapping_add(market);
            let ds = generate(&cfg)?;
            let firms = crate::data::eligible_reference_firms(&ds, min_bids);
            for firm in firms {
                if collected >= spec.graphs {
                    break;
                }
                match build_interaction_graph(&ds, &firm, &format!("m{market:03}")) {
                    Ok(g) => {
                        out.push((g, spec.config.tag.clone()));
                        collected += 1;
                    }
                    Err(ScreenError::NoEligibleTenders(_)) => continue,
                    Err(e) => return Err(e.into()),
                }
            }
            market += 1;
        }
    }
    Ok(out)
}
