use std::fs;
use std::path::{Path, PathBuf};

use msl_tensor::{AdamState, Binder, Graph, Real, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use super::dataset::Case;
use super::losses::{self, LossBreakdown, LossWeights};
use crate::error::{MslError, Result};
use crate::model::checkpoint::{entry_text, read_mslc, text_entry, write_mslc};
use crate::model::{LambdaField, Modality, MslModel, TokenGroups};

/// Modality kept by the single-modality auxiliary pass at `iteration`:
/// MRI on even iterations, CT on odd ones.
pub fn aux_modality(iteration: usize) -> Modality {
    if iteration.is_multiple_of(2) {
        Modality::Mri
    } else {
        Modality::Ct
    }
}

/// Indices of the minibatch drawn at `iteration` (without replacement).
pub fn batch_indices(seed: u64, iteration: usize, batch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (iteration as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rand::seq::index::sample(&mut rng, n, batch.min(n)).into_vec()
}

/// Loss nodes of one case.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub rec: Var,
    pub fusion: Var,
    pub aux: Var,
    pub aux_feat: Var,
    pub total: Var,
}

/// Builds every loss term for one case: the paired pass decoded at lambda
/// 0, 1 and 0.5, and the single-modality auxiliary pass keeping `aux`.
pub fn loss_graph<T: Real>(
    g: &Graph<T>,
    p: &mut Binder<T>,
    model: &MslModel,
    case: &Case,
    aux: Modality,
    weights: &LossWeights,
) -> Result<LossVars> {
    let gt_ct = g.constant(case.pair.ct_gt.to_tensor().cast());
    let gt_mri = g.constant(case.pair.mri_gt.to_tensor().cast());

    let input = &case.inputs;
    let (img_ct, img_mri) = match (&input.ct, &input.mri) {
        (Some(c), Some(m)) => (c, m),
        _ => return Err(MslError::MissingModality),
    };
    let f_ct = model.encode(g, p, Modality::Ct, g.constant(img_ct.to_tensor().cast()))?;
    let f_mri = model.encode(g, p, Modality::Mri, g.constant(img_mri.to_tensor().cast()))?;
    let t_ct = model.tokenize(g, f_ct)?;
    let t_mri = model.tokenize(g, f_mri)?;

    let groups = model.interact(g, p, Some(t_ct), Some(t_mri))?;
    let rep = model.compose(g, p, &groups)?;
    let decode = |p: &mut Binder<T>, rep, l: f64| {
        let lam = model.lambda_var(g, &LambdaField::Scalar(l))?;
        model.decode_var(g, p, rep, lam)
    };
    let x_ct = decode(p, rep, 0.0)?;
    let x_mri = decode(p, rep, 1.0)?;
    let x_mid = decode(p, rep, 0.5)?;

    let aux_groups: TokenGroups = match aux {
        Modality::Mri => model.interact(g, p, None, Some(t_mri))?,
        Modality::Ct => model.interact(g, p, Some(t_ct), None)?,
    };
    let aux_rep = model.compose(g, p, &aux_groups)?;
    let aux_ct = decode(p, aux_rep, 0.0)?;
    let aux_mri = decode(p, aux_rep, 1.0)?;

    let rec = losses::loss_rec(g, x_ct, x_mri, gt_ct, gt_mri)?;
    let fusion = losses::loss_fusion(g, x_ct, x_mri, x_mid)?;
    let aux_l = losses::loss_aux(g, aux_ct, aux_mri, gt_ct, gt_mri)?;
    let aux_feat = losses::loss_aux_feat(g, &groups)?;
    let total = losses::total_loss(g, [rec, fusion, aux_l, aux_feat], weights)?;
    Ok(LossVars {
        rec,
        fusion,
        aux: aux_l,
        aux_feat,
        total,
    })
}

/// Forward and backward of every loss term for one case. Returns the
/// per-parameter gradients and the loss values.
pub fn sample_gradients(
    model: &MslModel,
    case: &Case,
    aux: Modality,
    config: &TrainConfig,
) -> Result<(Vec<Option<Tensor<f32>>>, LossBreakdown)> {
    let g = Graph::<f32>::new();
    let mut p = Binder::new(&model.params, true);
    let l = loss_graph(&g, &mut p, model, case, aux, &config.loss)?;
    let val = |v| g.value(v).item() as f64;
    let parts = LossBreakdown {
        rec: val(l.rec),
        fusion: val(l.fusion),
        aux: val(l.aux),
        aux_feat: val(l.aux_feat),
        total: val(l.total),
    };
    if !parts.total.is_finite() {
        return Err(MslError::NonFinite(format!("loss {parts:?}")));
    }
    let mut grads = g.backward(l.total)?;
    Ok((p.collect(&mut grads), parts))
}

/// One optimizer step on `batch`: gradients averaged over the batch, Adam
/// at the scheduled learning rate.
pub fn train_step(
    model: &mut MslModel,
    opt: &mut AdamState,
    batch: &[&Case],
    iteration: usize,
    config: &TrainConfig,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(MslError::InvalidInput("empty batch".into()));
    }
    let aux = aux_modality(iteration);
    let mut sum: Vec<Option<Vec<f32>>> = vec![None; model.params.len()];
    let mut parts = LossBreakdown::default();
    for case in batch {
        let (grads, p) = sample_gradients(model, case, aux, config)?;
        parts = parts.add(p);
        for (acc, g) in sum.iter_mut().zip(grads) {
            if let Some(g) = g {
                match acc {
                    Some(a) => a.iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    None => *acc = Some(g.into_data()),
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f32;
    let grads: Vec<Option<Tensor<f32>>> = sum
        .into_iter()
        .zip(model.params.tensors())
        .map(|(g, p)| {
            g.map(|mut g| {
                g.iter_mut().for_each(|v| *v *= inv);
                Tensor::new(p.shape().to_vec(), g).expect("gradient matches parameter")
            })
        })
        .collect();
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Err(MslError::NonFinite(format!("gradient at iteration {iteration}")));
    }
    opt.lr = config.lr_at(iteration);
    opt.step(&mut model.params, &grads)?;
    Ok(parts.scaled(1.0 / batch.len() as f64))
}

/// One line of the training curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveRow {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub const CURVE_HEADER: [&str; 7] = [
    "iteration",
    "loss_rec",
    "loss_fusion",
    "loss_aux",
    "loss_aux_feat",
    "total",
    "lr",
];

pub fn write_curve(path: &Path, rows: &[CurveRow], append: bool) -> Result<()> {
    let exists = path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)?;
    let mut w = csv::Writer::from_writer(file);
    if !append || !exists {
        w.write_record(CURVE_HEADER)?;
    }
    for r in rows {
        let l = r.loss;
        w.write_record(&[
            r.iteration.to_string(),
            l.rec.to_string(),
            l.fusion.to_string(),
            l.aux.to_string(),
            l.aux_feat.to_string(),
            l.total.to_string(),
            r.lr.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve(path: &Path) -> Result<Vec<CurveRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CURVE_HEADER {
        return Err(MslError::Format(format!("unexpected curve header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| MslError::Format(format!("bad curve field {i}")))
        };
        rows.push(CurveRow {
            iteration: f(0)? as usize,
            loss: LossBreakdown {
                rec: f(1)?,
                fusion: f(2)?,
                aux: f(3)?,
                aux_feat: f(4)?,
                total: f(5)?,
            },
            lr: f(6)?,
        });
    }
    Ok(rows)
}

/// Model, optimizer and schedule position of a training run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: MslModel,
    pub opt: AdamState,
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = MslModel::new(config.model.clone(), config.seed)?;
        let opt = AdamState::new(
            &model.params,
            config.lr,
            (config.beta1, config.beta2),
            config.weight_decay,
        );
        Ok(Self {
            config,
            model,
            opt,
            iteration: 0,
        })
    }

    /// Runs iteration `self.iteration` on `cases` and advances.
    pub fn step(&mut self, cases: &[Case]) -> Result<CurveRow> {
        let it = self.iteration;
        let idx = batch_indices(self.config.seed, it, self.config.batch_size, cases.len());
        let batch: Vec<&Case> = idx.iter().map(|&i| &cases[i]).collect();
        let loss = train_step(&mut self.model, &mut self.opt, &batch, it, &self.config)?;
        self.iteration += 1;
        Ok(CurveRow {
            iteration: it,
            loss,
            lr: self.config.lr_at(it),
        })
    }

    /// Trains up to `config.iterations`. With `out_dir`, writes periodic
    /// checkpoints (keeping the newest `keep_checkpoints`), `model.mslc` and
    /// `curve.csv`.
    pub fn run(
        &mut self,
        cases: &[Case],
        out_dir: Option<&Path>,
        mut progress: impl FnMut(&CurveRow),
    ) -> Result<Vec<CurveRow>> {
        if cases.is_empty() {
            return Err(MslError::InvalidInput("no training cases".into()));
        }
        if let Some(d) = out_dir {
            fs::create_dir_all(d)?;
        }
        let resumed = self.iteration > 0;
        let mut rows = Vec::new();
        let mut saved: Vec<PathBuf> = Vec::new();
        while self.iteration < self.config.iterations {
            let row = self.step(cases)?;
            progress(&row);
            rows.push(row);
            if let Some(d) = out_dir {
                let every = self.config.checkpoint_every;
                if every > 0 && self.iteration.is_multiple_of(every) && self.iteration < self.config.iterations {
                    let p = d.join(format!("ckpt_{:06}.mslc", self.iteration));
                    self.save(&p)?;
                    saved.push(p);
                    while saved.len() > self.config.keep_checkpoints {
                        let old = saved.remove(0);
                        let _ = fs::remove_file(old);
                    }
                }
            }
        }
        if let Some(d) = out_dir {
            self.save(&d.join("model.mslc"))?;
            write_curve(&d.join("curve.csv"), &rows, resumed)?;
        }
        Ok(rows)
    }

    /// Checkpoint with model, optimizer moments and schedule position.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = self.model.to_entries();
        entries.push(text_entry("meta.train_config", &self.config.to_toml()));
        let (m, v) = self.opt.moments();
        for (((name, t), m), v) in self.model.params.iter().zip(m).zip(v) {
            let shape = t.shape().to_vec();
            entries.push((format!("adam.m.{name}"), Tensor::new(shape.clone(), m.clone())?));
            entries.push((format!("adam.v.{name}"), Tensor::new(shape, v.clone())?));
        }
        let scalar = |v: usize| Tensor::new(vec![2], vec![(v >> 24) as f32, (v & 0xFF_FFFF) as f32]);
        entries.push(("train.iteration".into(), scalar(self.iteration)?));
        entries.push(("train.adam_step".into(), scalar(self.opt.step_count() as usize)?));
        write_mslc(path, &entries)
    }

    /// Restores a checkpoint written by [`Trainer::save`]. The training
    /// config is taken from the checkpoint unless `config` is given.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<Self> {
        let entries = read_mslc(path)?;
        let find = |n: &str| {
            entries
                .iter()
                .find(|(k, _)| k == n)
                .map(|(_, t)| t)
                .ok_or_else(|| MslError::Format(format!("checkpoint lacks `{n}`")))
        };
        let config = match config {
            Some(c) => c,
            None => TrainConfig::from_toml(&entry_text(find("meta.train_config")?)?)?,
        };
        let model = MslModel::from_entries(&entries)?;
        if model.config != config.model {
            return Err(MslError::Config(
                "checkpoint model config differs from training config".into(),
            ));
        }
        let unpack = |t: &Tensor<f32>| -> Result<usize> {
            match t.data() {
                [hi, lo] => Ok(((*hi as usize) << 24) | *lo as usize),
                _ => Err(MslError::Format("bad counter entry".into())),
            }
        };
        let iteration = unpack(find("train.iteration")?)?;
        let step = unpack(find("train.adam_step")?)? as u64;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, _) in model.params.iter() {
            m.push(find(&format!("adam.m.{name}"))?.data().to_vec());
            v.push(find(&format!("adam.v.{name}"))?.data().to_vec());
        }
        let mut opt = AdamState::new(
            &model.params,
            config.lr,
            (config.beta1, config.beta2),
            config.weight_decay,
        );
        opt.restore(step, m, v)?;
        Ok(Self {
            config,
            model,
            opt,
            iteration,
        })
    }
}
