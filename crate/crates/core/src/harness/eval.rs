//! Retrieval evaluation: every test sketch queries the gallery of all test
//! photos, ranked by squared Euclidean distance. By default both sides are
//! embedded independently; the paired protocol embeds every query/photo
//! pair jointly instead.

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::data::{Dataset, DetailLevel, RegionFeatureRecord};
use crate::embedder::{embed_pair, ExplicitTraces, Model};
use crate::error::{Error, Result};
use crate::harness::build_fingerprint;
use crate::harness::train::record_trace;
use crate::hierarchy::GumbelConfig;
use crate::tensor::Tensor;

/// How a query is compared with a gallery item.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Protocol {
    /// Partner-free embeddings of query and item; co-attention unused.
    #[default]
    Independent,
    /// Query and item embedded jointly as a pair, as in training; one
    /// greedy forward pass per query/item pair.
    Paired,
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Independent => "independent",
            Protocol::Paired => "paired",
        })
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "independent" => Ok(Protocol::Independent),
            "paired" => Ok(Protocol::Paired),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub acc_at_1: f64,
    pub acc_at_10: f64,
    /// Query identities, in test-split order.
    pub queries: Vec<u32>,
    /// 1-based rank of each query's true photo.
    pub ranks: Vec<usize>,
    pub gallery_size: usize,
    pub variant: DetailLevel,
    pub protocol: Protocol,
    pub config_fingerprint: String,
    pub build: String,
    pub wall_clock: Duration,
}

impl RetrievalReport {
    /// Equality of everything but the timing.
    pub fn same_result(&self, other: &RetrievalReport) -> bool {
        RetrievalReport {
            wall_clock: Duration::ZERO,
            ..self.clone()
        } == RetrievalReport {
            wall_clock: Duration::ZERO,
            ..other.clone()
        }
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "config  {}\nbuild   {}\nqueries {} ({}, {})  gallery {}\nacc@1   {:.4}\nacc@10  {:.4}\ntime    {:.3}s\n\n{:>8}  {:>5}\n",
            self.config_fingerprint,
            self.build,
            self.queries.len(),
            self.variant,
            self.protocol,
            self.gallery_size,
            self.acc_at_1,
            self.acc_at_10,
            self.wall_clock.as_secs_f64(),
            "identity",
            "rank"
        );
        for (q, r) in self.queries.iter().zip(&self.ranks) {
            out.push_str(&format!("{q:>8}  {r:>5}\n"));
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("identity,rank\n");
        for (q, r) in self.queries.iter().zip(&self.ranks) {
            out.push_str(&format!("{q},{r}\n"));
        }
        out
    }

    pub fn summary_csv_header() -> &'static str {
        "variant,protocol,acc_at_1,acc_at_10,queries,gallery,config,build,seconds"
    }

    pub fn summary_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.3}",
            self.variant,
            self.protocol,
            self.acc_at_1,
            self.acc_at_10,
            self.queries.len(),
            self.gallery_size,
            self.config_fingerprint,
            self.build,
            self.wall_clock.as_secs_f64()
        )
    }
}

/// 1-based rank of `truth` among `distances`; ties go to the lower index.
pub fn rank_of(distances: &[f64], truth: usize) -> usize {
    let d = distances[truth];
    1 + distances
        .iter()
        .enumerate()
        .filter(|&(i, &x)| x < d || (x == d && i < truth))
        .count()
}

fn sq_dist(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn embed(model: &Model, r: &RegionFeatureRecord) -> Result<Tensor> {
    let script = if model.cfg.modes.explicit_hierarchy {
        Some(record_trace(r)?)
    } else {
        None
    };
    let (v, _) = model.embed_single_value(&r.regions, r.modality, script.as_ref())?;
    if !v.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite {} embedding for identity {}",
            r.modality, r.identity
        )));
    }
    Ok(v)
}

fn pair_distance(model: &Model, sketch: &RegionFeatureRecord, photo: &RegionFeatureRecord) -> Result<f64> {
    let cfg = &model.cfg;
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let gumbel = GumbelConfig::greedy(cfg.tau);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let traces = if cfg.modes.explicit_hierarchy {
        Some((record_trace(sketch)?, record_trace(photo)?))
    } else {
        None
    };
    let script = traces.as_ref().map(|(s, p)| ExplicitTraces { sketch: s, photo: p });
    let e = embed_pair(
        &mut g,
        &vars,
        cfg,
        &sketch.regions,
        &photo.regions,
        &gumbel,
        &mut rng,
        script,
    )?;
    let d = sq_dist(g.value(e.sketch_final), g.value(e.photo_final));
    if !d.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite distance between sketch {} and photo {}",
            sketch.identity, photo.identity
        )));
    }
    Ok(d)
}

/// Queries are the test sketches at `variant`; the gallery is every test
/// photo in split order.
pub fn evaluate(model: &Model, ds: &Dataset, variant: DetailLevel) -> Result<RetrievalReport> {
    evaluate_with(model, ds, variant, Protocol::Independent)
}

pub fn evaluate_with(
    model: &Model,
    ds: &Dataset,
    variant: DetailLevel,
    protocol: Protocol,
) -> Result<RetrievalReport> {
    let start = Instant::now();
    if ds.d_raw != model.cfg.d_raw {
        return Err(Error::Data(format!(
            "dataset d_raw is {}, model expects {}",
            ds.d_raw, model.cfg.d_raw
        )));
    }
    if ds.test.is_empty() {
        return Err(Error::Data("dataset has no test identities".into()));
    }
    let photos = ds
        .test
        .iter()
        .map(|&id| {
            ds.photo(id)
                .ok_or_else(|| Error::Data(format!("test identity {id} has no photo")))
        })
        .collect::<Result<Vec<_>>>()?;
    let gallery = match protocol {
        Protocol::Independent => photos.iter().map(|r| embed(model, r)).collect::<Result<Vec<_>>>()?,
        Protocol::Paired => Vec::new(),
    };

    let mut ranks = Vec::with_capacity(ds.test.len());
    for (truth, &id) in ds.test.iter().enumerate() {
        let r = ds.sketch(id, variant).ok_or_else(|| {
            Error::Data(format!("test identity {id} has no {variant} sketch"))
        })?;
        let dists: Vec<f64> = match protocol {
            Protocol::Independent => {
                let q = embed(model, r)?;
                gallery.iter().map(|p| sq_dist(&q, p)).collect()
            }
            Protocol::Paired => photos
                .iter()
                .map(|p| pair_distance(model, r, p))
                .collect::<Result<_>>()?,
        };
        ranks.push(rank_of(&dists, truth));
    }
    let n = ranks.len() as f64;
    let within = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RetrievalReport {
        acc_at_1: within(1),
        acc_at_10: within(10),
        queries: ds.test.clone(),
        ranks,
        gallery_size: photos.len(),
        variant,
        protocol,
        config_fingerprint: String::new(),
        build: build_fingerprint(),
        wall_clock: start.elapsed(),
    })
}
