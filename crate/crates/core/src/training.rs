//! Offline training: embeddings → PCA → multitask cost learning → optional
//! constraint learning → a validated [`LearnedModel`].

use nalgebra::DMatrix;

use crate::config::Config;
use crate::constraint::{post_check, sample_unsafe, solve_feasibility, ConstraintParams, PostCheck, TaskCost};
use crate::demos::{attach_embeddings, DemoSet};
use crate::embedding::{fit_pca, rows_to_matrix, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::features::FeatureLibrary;
use crate::irl::{self, IrlData};
use crate::model::{assemble, LearnedModel, Provenance};
use crate::sim::Trajectory;

/// Result of constraint learning with its post-check.
#[derive(Clone, Debug)]
pub struct ConstraintFit {
    pub rho: ConstraintParams,
    pub check: PostCheck,
    pub n_unsafe: usize,
}

/// Learn ρ from the obstacle-influenced demonstrations, judging
/// counterexamples by the learned per-task cost `θ_t = M(ẽ_t)`.
pub fn learn_constraint(
    set: &DemoSet,
    thetas: &[Vec<f64>],
    m: &crate::features::SharedParams,
    library: &FeatureLibrary,
    cfg: &Config,
) -> Result<Option<ConstraintFit>> {
    let mut safe: Vec<Trajectory> = Vec::new();
    let mut unsafe_: Vec<Trajectory> = Vec::new();
    let mut demo_index = 0;
    for (ex, theta) in set.examples.iter().zip(thetas) {
        for d in &ex.demos_safe {
            let cost = TaskCost {
                library,
                theta,
                m,
                objects: &d.objects,
            };
            let seed = cfg.constraint.feasibility.seed ^ ((demo_index as u64) << 16);
            let kept = sample_unsafe(&d.trajectory, &cost, &set.dynamics, &cfg.constraint.sampler, demo_index, seed)?;
            unsafe_.extend(kept.into_iter().map(|s| s.trajectory));
            safe.push(d.trajectory.clone());
            demo_index += 1;
        }
    }
    if safe.is_empty() {
        return Ok(None);
    }
    // free demonstrations are safe too
    for ex in &set.examples {
        safe.extend(ex.demos_free.iter().map(|d| d.trajectory.clone()));
    }
    let rho = solve_feasibility(&safe, &unsafe_, cfg.constraint.family, &cfg.constraint.feasibility)?;
    let check = post_check(&rho, &safe, &unsafe_);
    Ok(Some(ConstraintFit {
        rho,
        check,
        n_unsafe: unsafe_.len(),
    }))
}

pub struct TrainReport {
    pub model: LearnedModel,
    pub constraint: Option<ConstraintFit>,
    pub loss_curve: Vec<f64>,
}

/// Train a model from a demonstration set. Missing embeddings are computed
/// with `embedder`; `demoset_hash` is recorded in the provenance.
pub fn train_model(
    set: &DemoSet,
    embedder: &dyn EmbeddingProvider,
    cfg: &Config,
    demoset_hash: &str,
) -> Result<TrainReport> {
    set.validate()?;
    let mut set = set.clone();
    if set.examples.iter().any(|e| e.embedding.is_none()) {
        attach_embeddings(&mut set, embedder)?;
    }
    let rows: Vec<Vec<f64>> = set
        .examples
        .iter()
        .map(|e| e.embedding.as_ref().expect("attached above").values.clone())
        .collect();
    let emb = rows_to_matrix(&rows)?;
    let z = cfg.embedding.z;
    if z > emb.nrows().min(emb.ncols()) {
        return Err(Error::InvalidArgument(format!(
            "z = {z} exceeds min(T, s) = {} for this demo set",
            emb.nrows().min(emb.ncols())
        )));
    }
    let pca = fit_pca(&emb, z)?;
    let library = FeatureLibrary::default();
    let data = IrlData::from_demoset(&set, &pca, library)?;
    let out = irl::train(&data, &cfg.irl)?;

    let thetas: Vec<Vec<f64>> = data
        .tasks
        .iter()
        .map(|t| out.mapping.forward(&t.embedding).map(|v| v.iter().copied().collect()))
        .collect::<Result<_>>()?;
    let constraint = learn_constraint(&set, &thetas, &out.m, &library, cfg)?;

    let tail = out.loss_curve.iter().rev().take(5).rev().copied().collect();
    let provenance = Provenance {
        demoset_hash: demoset_hash.to_string(),
        config_hash: cfg.hash(),
        seeds: vec![cfg.irl.seed, cfg.constraint.feasibility.seed],
        loss_curve_tail: tail,
    };
    let model = assemble(
        pca,
        out.mapping,
        out.m,
        constraint.as_ref().map(|c| c.rho),
        library,
        set.dynamics,
        &rows_provider_id(&set, embedder),
        set.descriptions(),
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j]),
        provenance,
    )?;
    Ok(TrainReport {
        model,
        constraint,
        loss_curve: out.loss_curve,
    })
}

fn rows_provider_id(set: &DemoSet, embedder: &dyn EmbeddingProvider) -> String {
    set.examples
        .first()
        .and_then(|e| e.embedding.as_ref())
        .map(|e| e.provider_id.clone())
        .unwrap_or_else(|| embedder.id().to_string())
}
