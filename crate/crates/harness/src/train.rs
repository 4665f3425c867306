//! Mini-batch Adam over the composite loss, with cosine decay and
//! checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use cat_core::loss::{loss_total, GroundTruth, LossBreakdown};
use cat_core::model::CatModel;
use cat_core::tensor::{cosine_lr, AdamState, Tensor};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentDraw};
use crate::checkpoint::{Checkpoint, RngState};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};
use crate::synth::{Split, SynthSample, World};

/// Stream of the trainer's RNG, distinct from weight init and data.
const TRAIN_STREAM: u64 = 0x7472_6169_6e;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub lr: f64,
    /// Batch means of the weighted total and each unweighted term.
    pub loss: LossBreakdown,
}

pub struct Trainer {
    pub config: RunConfig,
    pub world: World,
    pub model: CatModel,
    pub adam: AdamState,
    /// Updates applied so far.
    pub step: u64,
    pub rng: ChaCha8Rng,
    pub data: Vec<SynthSample>,
    pub log: Vec<StepLog>,
}

/// Learning rate of update `step` (0-based) out of `total`: cosine decay
/// from `base` at the first update to zero at the last.
pub fn schedule(step: u64, total: u64, base: f64) -> f64 {
    cosine_lr(step, total.saturating_sub(1), base)
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let world = World::from_config(&config)?;
        let model = CatModel::new(config.model.clone(), config.seed)?;
        let adam = AdamState::new(config.train.adam, model.params.iter().map(|(_, t)| t));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        let data = world.dataset(config.data.seed, Split::Train, config.data.n_train)?;
        Ok(Self {
            config,
            world,
            model,
            adam,
            step: 0,
            rng,
            data,
            log: Vec::new(),
        })
    }

    /// Continues a run. `config`, when given, must describe the same
    /// architecture; its schedule and cadence settings take effect.
    pub fn resume(ckpt: Checkpoint, config: Option<RunConfig>) -> Result<Self> {
        let config = match config {
            Some(c) => {
                c.validate()?;
                CatModel::from_params(c.model.clone(), ckpt.params.clone())?;
                c
            }
            None => ckpt.config.clone(),
        };
        let world = World::from_config(&config)?;
        let model = CatModel::from_params(config.model.clone(), ckpt.params)?;
        let data = world.dataset(config.data.seed, Split::Train, config.data.n_train)?;
        Ok(Self {
            adam: AdamState {
                config: config.train.adam,
                ..ckpt.adam
            },
            config,
            world,
            model,
            step: ckpt.step,
            rng: ckpt.rng.restore(),
            data,
            log: Vec::new(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            rng: RngState::capture(&self.rng),
            params: self.model.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn total_steps(&self) -> u64 {
        self.config.total_steps()
    }

    pub fn done(&self) -> bool {
        self.step >= self.total_steps()
    }

    fn batch_indices(&mut self) -> Vec<usize> {
        let n = self.data.len();
        let b = self.config.train.batch;
        if b >= n {
            (0..n).collect()
        } else {
            let mut idx = index::sample(&mut self.rng, n, b).into_vec();
            idx.sort_unstable();
            idx
        }
    }

    /// Loss and parameter gradients for one image.
    fn sample_gradients(&self, image: &Tensor, gt: &GroundTruth) -> Result<(LossBreakdown, Vec<Tensor>)> {
        let mut ctx = self.model.ctx(true);
        let img = ctx.tape.constant(image.clone());
        let out = self.model.forward(&mut ctx, img)?;
        let l = loss_total(
            &mut ctx.tape,
            &self.world.template,
            out.params,
            Some(out.boxes),
            gt,
            &self.world.camera,
            &self.config.loss,
        )?;
        let grads = ctx.gradients(l.total)?;
        Ok((l.terms, grads))
    }

    /// One optimizer update. On a non-finite loss or gradient the weights
    /// are left untouched and a numerical error is returned.
    pub fn step_once(&mut self) -> Result<StepLog> {
        let batch = self.batch_indices();
        let mut acc: Option<Vec<Tensor>> = None;
        let mut sum = LossBreakdown::default();
        for &i in &batch {
            let (image, gt) = if self.config.augment.enabled {
                let draw = AugmentDraw::sample(&self.config.augment, &mut self.rng);
                augment(&self.world, &self.data[i].gt.params, &draw, &mut self.rng)?
            } else {
                (self.data[i].image.clone(), self.data[i].gt.clone())
            };
            let (terms, grads) = self.sample_gradients(&image, &gt)?;
            if !terms.total.is_finite() {
                return Err(self.numerical(format!("loss is {} on sample {i}", terms.total)));
            }
            sum.total += terms.total;
            sum.smplx += terms.smplx;
            sum.kpt3d += terms.kpt3d;
            sum.kpt2d += terms.kpt2d;
            sum.bbox += terms.bbox;
            match &mut acc {
                None => acc = Some(grads),
                Some(a) => {
                    for (x, g) in a.iter_mut().zip(&grads) {
                        x.data_mut().iter_mut().zip(g.data()).for_each(|(x, g)| *x += g);
                    }
                }
            }
        }
        let k = 1.0 / batch.len() as f64;
        let mut grads = acc.expect("non-empty batch");
        for (g, (name, _)) in grads.iter_mut().zip(self.model.params.iter()) {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
            if !g.all_finite() {
                return Err(self.numerical(format!("non-finite gradient for {name}")));
            }
        }
        let lr = schedule(self.step, self.total_steps(), self.config.train.adam.lr);
        self.adam.step(self.model.params.tensors_mut(), &grads, lr)?;
        let entry = StepLog {
            step: self.step,
            lr,
            loss: LossBreakdown {
                total: sum.total * k,
                smplx: sum.smplx * k,
                kpt3d: sum.kpt3d * k,
                kpt2d: sum.kpt2d * k,
                bbox: sum.bbox * k,
            },
        };
        self.step += 1;
        self.log.push(entry);
        Ok(entry)
    }

    fn numerical(&self, detail: String) -> HarnessError {
        HarnessError::Numerical {
            step: self.step,
            detail,
            checkpoint: None,
        }
    }

    /// Mean loss over the stored training samples, without augmentation or
    /// updates.
    pub fn dataset_loss(&self) -> Result<LossBreakdown> {
        let mut sum = LossBreakdown::default();
        for s in &self.data {
            let mut ctx = self.model.ctx(false);
            let img = ctx.tape.constant(s.image.clone());
            let out = self.model.forward(&mut ctx, img)?;
            let l = loss_total(
                &mut ctx.tape,
                &self.world.template,
                out.params,
                Some(out.boxes),
                &s.gt,
                &self.world.camera,
                &self.config.loss,
            )?;
            sum.total += l.terms.total;
            sum.smplx += l.terms.smplx;
            sum.kpt3d += l.terms.kpt3d;
            sum.kpt2d += l.terms.kpt2d;
            sum.bbox += l.terms.bbox;
        }
        let k = 1.0 / self.data.len() as f64;
        Ok(LossBreakdown {
            total: sum.total * k,
            smplx: sum.smplx * k,
            kpt3d: sum.kpt3d * k,
            kpt2d: sum.kpt2d * k,
            bbox: sum.bbox * k,
        })
    }

    /// Trains to the end of the schedule. Writes periodic checkpoints and
    /// a CSV step log under `out_dir` when given; on a numerical failure the
    /// last good state goes to `last_good.ckpt` there.
    pub fn run(&mut self, out_dir: Option<&Path>, mut on_log: impl FnMut(&StepLog)) -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        }
        let every = self.config.train.log_every.max(1);
        let cadence = self.config.train.ckpt_every;
        while !self.done() {
            let rng_before = RngState::capture(&self.rng);
            match self.step_once() {
                Ok(entry) => {
                    if entry.step % every == 0 || self.done() {
                        on_log(&entry);
                    }
                }
                Err(HarnessError::Numerical { step, detail, .. }) => {
                    // A failed step leaves weights and moments untouched.
                    let checkpoint = match out_dir {
                        Some(dir) => {
                            let p = dir.join("last_good.ckpt");
                            Checkpoint {
                                rng: rng_before,
                                ..self.checkpoint()
                            }
                            .save(&p)?;
                            Some(p.display().to_string())
                        }
                        None => None,
                    };
                    if let Some(dir) = out_dir {
                        self.write_log(&dir.join("log.csv"))?;
                    }
                    return Err(HarnessError::Numerical { step, detail, checkpoint });
                }
                Err(e) => return Err(e),
            }
            if let Some(dir) = out_dir {
                if cadence > 0 && self.step % cadence == 0 && !self.done() {
                    self.checkpoint().save(dir.join(format!("step_{:06}.ckpt", self.step)))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            self.checkpoint().save(final_checkpoint(dir))?;
            self.write_log(&dir.join("log.csv"))?;
        }
        Ok(())
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut s = String::from("step,lr,total,smplx,kpt3d,kpt2d,bbox\n");
        for e in &self.log {
            let l = &e.loss;
            writeln!(s, "{},{:e},{:e},{:e},{:e},{:e},{:e}", e.step, e.lr, l.total, l.smplx, l.kpt3d, l.kpt2d, l.bbox)
                .expect("write to string");
        }
        std::fs::write(path, s).map_err(|e| HarnessError::io(path, e))
    }
}

pub fn final_checkpoint(out_dir: &Path) -> PathBuf {
    out_dir.join("final.ckpt")
}
