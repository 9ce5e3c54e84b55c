//! Baseline and mixed models behind `train` and `evaluate`.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use doseloop_core::dataset::Dataset;
use doseloop_core::glmmtree::{
    default_partitioners, fit_bagged_glmm_tree, fit_glmm_tree, BaggedGlmmTree, BaggedParams,
    GlmmTreeFit, GlmmTreeParams, MixedPredictor,
};
use doseloop_core::lmm::{fit_lmm, predict_lmm, Criterion, LmmFit, PredictMode, INTERCEPT};
use doseloop_core::rules::{extract_rules, RuleSet};
use doseloop_core::trees::{
    fit_cart, fit_forest, predict_tree, Forest, ForestParams, RegressionTree, TreeParams,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ModelChoice {
    Cart,
    Forest,
    Lmm,
    Glmmtree,
    BaggedGlmmtree,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrainedModel {
    Cart {
        features: Vec<String>,
        tree: RegressionTree,
    },
    Forest {
        features: Vec<String>,
        forest: Forest,
    },
    Lmm {
        features: Vec<String>,
        fit: LmmFit,
    },
    Glmmtree {
        fit: GlmmTreeFit,
    },
    BaggedGlmmtree {
        ensemble: BaggedGlmmTree,
        interpretable: GlmmTreeFit,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub regressors: Vec<String>,
    pub n_trees: usize,
    pub seed: u64,
    pub tree: GlmmTreeParams,
}

/// Design with a leading intercept column; rows with missing features
/// are rejected.
fn lmm_design(d: &Dataset, features: &[String]) -> Result<(DMatrix<f64>, Vec<String>)> {
    let x = d.matrix(features)?;
    if x.iter().any(|v| v.is_nan()) {
        bail!("the mixed model needs complete features");
    }
    let design = DMatrix::from_fn(x.nrows(), x.ncols() + 1, |i, j| if j == 0 { 1.0 } else { x[(i, j - 1)] });
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(features.iter().cloned());
    Ok((design, names))
}

pub fn train(choice: ModelChoice, d: &Dataset, opts: &TrainOptions) -> Result<TrainedModel> {
    let d = d.labelled();
    if d.is_empty() {
        bail!("no labelled rows to train on");
    }
    let features = d.schema().to_vec();
    let y = d.targets();
    let w = d.weights();
    let partitioners = default_partitioners(d.schema(), &opts.regressors);
    Ok(match choice {
        ModelChoice::Cart => TrainedModel::Cart {
            tree: fit_cart(&d.matrix(&features)?, &features, &y, &w, TreeParams::default())?,
            features,
        },
        ModelChoice::Forest => TrainedModel::Forest {
            forest: fit_forest(
                &d.matrix(&features)?,
                &features,
                &y,
                &w,
                ForestParams {
                    seed: opts.seed,
                    ..Default::default()
                },
            )?,
            features,
        },
        ModelChoice::Lmm => {
            let (x, names) = lmm_design(&d, &features)?;
            TrainedModel::Lmm {
                fit: fit_lmm(&x, &names, &y, &d.patient_ids(), &w, Criterion::Reml)?,
                features,
            }
        }
        ModelChoice::Glmmtree => TrainedModel::Glmmtree {
            fit: fit_glmm_tree(&d, &opts.regressors, &partitioners, &opts.tree)?,
        },
        ModelChoice::BaggedGlmmtree => {
            let params = BaggedParams {
                n_trees: opts.n_trees,
                bootstrap: true,
                seed: opts.seed,
                tree: opts.tree.clone(),
            };
            TrainedModel::BaggedGlmmtree {
                ensemble: fit_bagged_glmm_tree(&d, &opts.regressors, &partitioners, &params)?,
                interpretable: fit_glmm_tree(&d, &opts.regressors, &partitioners, &opts.tree)?,
            }
        }
    })
}

impl TrainedModel {
    /// Predictions for every record; mixed models add known patients'
    /// random intercepts.
    pub fn predict(&self, d: &Dataset) -> Result<Vec<f64>> {
        Ok(match self {
            TrainedModel::Cart { features, tree } => predict_tree(tree, &d.matrix(features)?),
            TrainedModel::Forest { features, forest } => forest.predict(&d.matrix(features)?),
            TrainedModel::Lmm { features, fit } => {
                let (x, names) = lmm_design(d, features)?;
                predict_lmm(fit, &x, &names, &d.patient_ids(), PredictMode::Conditional)?
            }
            TrainedModel::Glmmtree { fit } => fit.predict_dataset(d, PredictMode::Conditional)?,
            TrainedModel::BaggedGlmmtree { ensemble, .. } => {
                ensemble.predict_dataset(d, PredictMode::Conditional)?
            }
        })
    }

    /// Rule set of tree models.
    pub fn rules(&self) -> Result<RuleSet> {
        Ok(match self {
            TrainedModel::Cart { tree, .. } => extract_rules(tree),
            TrainedModel::Glmmtree { fit } => extract_rules(fit),
            TrainedModel::BaggedGlmmtree { interpretable, .. } => extract_rules(interpretable),
            TrainedModel::Forest { .. } | TrainedModel::Lmm { .. } => {
                bail!("this model has no single tree to read rules from")
            }
        })
    }

    /// Variance components of mixed models.
    pub fn variances(&self) -> Option<(f64, f64, BTreeMap<String, f64>)> {
        match self {
            TrainedModel::Lmm { fit, .. } => Some((fit.sigma2, fit.sigma_b2, fit.b_hat.clone())),
            TrainedModel::Glmmtree { fit } => Some((fit.sigma2, fit.sigma_b2, fit.b_hat.clone())),
            TrainedModel::BaggedGlmmtree { ensemble, .. } => Some(ensemble.variances()),
            _ => None,
        }
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&body).with_context(|| format!("parsing {}", path.display()))
    }
}
