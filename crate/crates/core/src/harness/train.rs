//! Triplet training over a dataset.
//!
//! Every training identity contributes one triplet per epoch: its sketch,
//! its photo, and the photo of a uniformly drawn other training identity.
//! Epoch `e` draws its order, negatives and per-item Gumbel seeds from
//! ChaCha stream `e + 1` of the run seed (stream 0 initializes the model),
//! so any epoch can be replayed from a checkpoint without replaying the
//! ones before it.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Graph;
use crate::checkpoint::{self, TrainState};
use crate::config::RunConfig;
use crate::data::{Dataset, RegionFeatureRecord};
use crate::embedder::{embed_pair, triplet_loss, ExplicitTraces, Model};
use crate::error::{Error, Result};
use crate::hierarchy::{GumbelConfig, HierarchyTrace};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: u32,
    pub negative: u32,
    pub gumbel_seed: u64,
}

/// Triplets of epoch `epoch`, in visiting order.
pub fn epoch_plan(run: &RunConfig, train_ids: &[u32], epoch: usize) -> Vec<Triplet> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order = train_ids.to_vec();
    order.shuffle(&mut rng);
    order
        .iter()
        .map(|&anchor| {
            let negative = if train_ids.len() < 2 {
                anchor
            } else {
                loop {
                    let n = train_ids[rng.gen_range(0..train_ids.len())];
                    if n != anchor {
                        break n;
                    }
                }
            };
            Triplet {
                anchor,
                negative,
                gumbel_seed: rng.gen(),
            }
        })
        .collect()
}

/// Ground-truth merge order of a record, required in explicit mode.
pub fn record_trace(r: &RegionFeatureRecord) -> Result<HierarchyTrace> {
    r.tree.as_ref().map(|t| t.to_trace(r.modality)).ok_or_else(|| {
        Error::Data(format!(
            "explicit hierarchy needs ground-truth trees; {} record of identity {} has none",
            r.modality, r.identity
        ))
    })
}

struct Item<'a> {
    sketch: &'a RegionFeatureRecord,
    pos: &'a RegionFeatureRecord,
    neg: &'a RegionFeatureRecord,
}

fn lookup<'a>(ds: &'a Dataset, t: &Triplet) -> Result<Item<'a>> {
    let missing = |what: &str, id: u32| Error::Data(format!("identity {id} has no {what}"));
    Ok(Item {
        sketch: ds.train_sketch(t.anchor).ok_or_else(|| missing("sketch", t.anchor))?,
        pos: ds.photo(t.anchor).ok_or_else(|| missing("photo", t.anchor))?,
        neg: ds.photo(t.negative).ok_or_else(|| missing("photo", t.negative))?,
    })
}

/// Loss of one triplet; gradients scaled by `scale` are added to the store.
fn triplet_step(model: &mut Model, item: &Item<'_>, t: &Triplet, scale: f64) -> Result<f64> {
    let cfg = model.cfg.clone();
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let gumbel = GumbelConfig::sample(cfg.tau, t.gumbel_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(t.gumbel_seed);
    let traces = if cfg.modes.explicit_hierarchy {
        Some((
            record_trace(item.sketch)?,
            record_trace(item.pos)?,
            record_trace(item.neg)?,
        ))
    } else {
        None
    };
    let script = |photo: usize| {
        traces.as_ref().map(|(s, p, n)| ExplicitTraces {
            sketch: s,
            photo: if photo == 0 { p } else { n },
        })
    };
    let sk = &item.sketch.regions;
    let pos = embed_pair(&mut g, &vars, &cfg, sk, &item.pos.regions, &gumbel, &mut rng, script(0))?;
    let neg = embed_pair(&mut g, &vars, &cfg, sk, &item.neg.regions, &gumbel, &mut rng, script(1))?;
    let loss = triplet_loss(&mut g, &pos, &neg, cfg.margin)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "loss is {value} on triplet (anchor {}, negative {})",
            t.anchor, t.negative
        )));
    }
    let grads = g.backward(loss)?;
    grads.accumulate_into(&g, &mut model.params, scale);
    Ok(value)
}

/// One optimizer step on `batch`: mean loss, mean gradient, Adam update.
/// A non-finite loss aborts before the parameters change.
pub fn train_step(state: &mut TrainState, ds: &Dataset, batch: &[Triplet]) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    state.model.params.zero_grad();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for t in batch {
        let item = lookup(ds, t)?;
        total += triplet_step(&mut state.model, &item, t, scale)?;
    }
    state.adam.update(&mut state.model.params);
    // Gradients are per-step scratch; clearing them keeps a live state equal
    // to its checkpoint.
    state.model.params.zero_grad();
    if !state.model.params.all_finite() {
        return Err(Error::Numeric("parameters became non-finite".into()));
    }
    Ok(total * scale)
}

/// Runs the next epoch and updates the early-stopping bookkeeping.
pub fn run_epoch(state: &mut TrainState, ds: &Dataset) -> Result<f64> {
    let plan = epoch_plan(&state.run, &ds.train, state.epoch);
    let mut total = 0.0;
    for batch in plan.chunks(state.run.batch) {
        total += train_step(state, ds, batch)? * batch.len() as f64;
    }
    let loss = total / plan.len().max(1) as f64;
    state.epoch += 1;
    state.losses.push(loss);
    if loss < state.best_loss {
        state.best_loss = loss;
        state.stale_epochs = 0;
    } else {
        state.stale_epochs += 1;
    }
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EpochBudget,
    Plateau,
}

/// Trains until the epoch budget or a loss plateau of `patience` epochs.
/// With `out`, a checkpoint is written after every epoch; on a numeric
/// failure the last good state goes to `out/failed` before the error is
/// returned. `on_epoch` sees the epoch number (1-based) and its loss.
pub fn fit(
    state: &mut TrainState,
    ds: &Dataset,
    out: Option<&Path>,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<StopReason> {
    check_dataset(&state.run, ds)?;
    loop {
        if state.epoch >= state.run.epochs {
            return Ok(StopReason::EpochBudget);
        }
        if state.run.patience > 0 && state.stale_epochs >= state.run.patience {
            return Ok(StopReason::Plateau);
        }
        let snapshot = state.clone();
        match run_epoch(state, ds) {
            Ok(loss) => on_epoch(state.epoch, loss),
            Err(e @ Error::Numeric(_)) => {
                *state = snapshot;
                if let Some(dir) = out {
                    checkpoint::save(state, &dir.join("failed"))?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        }
        if let Some(dir) = out {
            checkpoint::save(state, dir)?;
        }
    }
}

/// Rejects datasets the run cannot train on.
pub fn check_dataset(run: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.d_raw != run.model.d_raw {
        return Err(Error::Data(format!(
            "dataset d_raw is {}, config expects {}",
            ds.d_raw, run.model.d_raw
        )));
    }
    if ds.train.is_empty() {
        return Err(Error::Data("dataset has no training identities".into()));
    }
    for &id in &ds.train {
        let r = ds
            .train_sketch(id)
            .ok_or_else(|| Error::Data(format!("identity {id} has no sketch")))?;
        let p = ds
            .photo(id)
            .ok_or_else(|| Error::Data(format!("identity {id} has no photo")))?;
        if run.model.modes.explicit_hierarchy {
            record_trace(r)?;
            record_trace(p)?;
        }
    }
    Ok(())
}

/// Trains from scratch, or from the checkpoint in `out` when `resume` is
/// set and one exists.
pub fn train(
    run: &RunConfig,
    ds: &Dataset,
    out: Option<&Path>,
    resume: bool,
    on_epoch: impl FnMut(usize, f64),
) -> Result<(TrainState, StopReason)> {
    let mut state = match out {
        Some(dir) if resume && dir.join("manifest.txt").exists() => {
            let state = checkpoint::load(dir)?;
            let mut expected = run.clone();
            expected.epochs = state.run.epochs;
            if state.run != expected {
                return Err(Error::Config(format!(
                    "checkpoint in {} was trained with a different config",
                    dir.display()
                )));
            }
            TrainState {
                run: run.clone(),
                ..state
            }
        }
        _ => TrainState::fresh(run)?,
    };
    let reason = fit(&mut state, ds, out, on_epoch)?;
    Ok((state, reason))
}
