//! Specialized end-to-end baselines: an 18-layer residual convolutional
//! encoder over the current patch (input layer adapted to one elevation
//! channel), task-specific auxiliary inputs concatenated to the pooled
//! feature, and a [512, 256, 512, 64, n] task MLP. One model per task,
//! trained from scratch.

use crate::ad::Var;
use crate::checkpoint::{assign_params, load_checkpoint, save_checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::heads::Task;
use crate::nn::{mse, Conv2d, GroupNorm, Linear, ParamStore, Session};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::sim::patch::PATCH_SIZE;
use crate::Real;
use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

/// Task MLP width sequence; element 0 is the pooled feature width.
pub const E2E_HEAD_WIDTHS: [usize; 4] = [512, 256, 512, 64];
const STAGE_CHANNELS: [usize; 4] = [64, 128, 256, 512];
const GN_GROUPS: usize = 8;

/// Aux width per task: the explicit extra information the specialized model
/// receives beyond the current patch.
pub fn e2e_aux_width(task: Task) -> usize {
    match task {
        Task::Fkd | Task::Pr => 8, // current action (2) + current pose (6)
        Task::Ikd => 6,            // desired pose delta
        Task::Bc => 3,             // relative goal
    }
}

struct BasicBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    conv2: Conv2d,
    gn2: GroupNorm,
    down: Option<(Conv2d, GroupNorm)>,
}

impl BasicBlock {
    fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(store, rng, &format!("{prefix}.conv1"), in_ch, out_ch, 3, stride, 1);
        let gn1 = GroupNorm::new(store, &format!("{prefix}.gn1"), out_ch, GN_GROUPS);
        let conv2 = Conv2d::new(store, rng, &format!("{prefix}.conv2"), out_ch, out_ch, 3, 1, 1);
        let gn2 = GroupNorm::new(store, &format!("{prefix}.gn2"), out_ch, GN_GROUPS);
        let down = if stride != 1 || in_ch != out_ch {
            let c = Conv2d::new(store, rng, &format!("{prefix}.down"), in_ch, out_ch, 1, stride, 0);
            let g = GroupNorm::new(store, &format!("{prefix}.down_gn"), out_ch, GN_GROUPS);
            Some((c, g))
        } else {
            None
        };
        BasicBlock {
            conv1,
            gn1,
            conv2,
            gn2,
            down,
        }
    }

    fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Var {
        let h = self.conv1.forward(s, x);
        let h = self.gn1.forward(s, h);
        let h = s.tape.relu(h);
        let h = self.conv2.forward(s, h);
        let h = self.gn2.forward(s, h);
        let skip = match &self.down {
            Some((c, g)) => {
                let d = c.forward(s, x);
                g.forward(s, d)
            }
            None => x,
        };
        let sum = s.tape.add(h, skip);
        s.tape.relu(sum)
    }
}

pub struct E2eArch {
    pub task: Task,
    stem: Conv2d,
    stem_gn: GroupNorm,
    blocks: Vec<BasicBlock>,
    head: [Linear; 4],
}

impl E2eArch {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, seed: u64, task: Task) -> Self {
        let mut rng = substream(seed, "e2e-init");
        let stem = Conv2d::new(store, &mut rng, "stem.conv", 1, STAGE_CHANNELS[0], 7, 2, 3);
        let stem_gn = GroupNorm::new(store, "stem.gn", STAGE_CHANNELS[0], GN_GROUPS);
        let mut blocks = Vec::new();
        let mut in_ch = STAGE_CHANNELS[0];
        for (stage, &out_ch) in STAGE_CHANNELS.iter().enumerate() {
            for b in 0..2 {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    store,
                    &mut rng,
                    &format!("stage{stage}.block{b}"),
                    in_ch,
                    out_ch,
                    stride,
                ));
                in_ch = out_ch;
            }
        }
        let input = E2E_HEAD_WIDTHS[0] + e2e_aux_width(task);
        let head = [
            Linear::new(store, &mut rng, "head.fc1", input, E2E_HEAD_WIDTHS[1]),
            Linear::new(store, &mut rng, "head.fc2", E2E_HEAD_WIDTHS[1], E2E_HEAD_WIDTHS[2]),
            Linear::new(store, &mut rng, "head.fc3", E2E_HEAD_WIDTHS[2], E2E_HEAD_WIDTHS[3]),
            Linear::new(
                store,
                &mut rng,
                "head.fc4",
                E2E_HEAD_WIDTHS[3],
                task.output_width(),
            ),
        ];
        E2eArch {
            task,
            stem,
            stem_gn,
            blocks,
            head,
        }
    }

    /// `patches [B, 1, 40, 40]`, `aux [B, A]` -> `[B, n]`. PR output is
    /// squashed to the patch range.
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, patches: Var, aux: Var) -> Var {
        let b = s.tape.value(patches).shape()[0];
        let h = self.stem.forward(s, patches);
        let h = self.stem_gn.forward(s, h);
        let h = s.tape.relu(h);
        let mut h = s.tape.max_pool2d(h, 3, 2, 1);
        for block in &self.blocks {
            h = block.forward(s, h);
        }
        let pooled = s.tape.mean_axes(h, &[2, 3]);
        let feat = s.tape.reshape(pooled, &[b, E2E_HEAD_WIDTHS[0]]);
        let mut x = if s.tape.value(aux).shape()[1] > 0 {
            s.tape.concat(&[feat, aux], 1)
        } else {
            feat
        };
        for (i, layer) in self.head.iter().enumerate() {
            x = layer.forward(s, x);
            if i + 1 < self.head.len() {
                x = s.tape.relu(x);
            }
        }
        if self.task == Task::Pr {
            x = s.tape.tanh_act(x);
        }
        x
    }

    pub fn loss_graph<S: Scalar>(
        &self,
        s: &mut Session<S>,
        patches: Var,
        aux: Var,
        targets: &ndarray::Array2<S>,
    ) -> Var {
        let pred = self.forward(s, patches, aux);
        let t = s.tape.constant(targets.clone().into_dyn());
        mse(&mut s.tape, pred, t)
    }
}

pub struct E2eModel<S: Scalar> {
    pub store: ParamStore<S>,
    pub arch: E2eArch,
}

impl<S: Scalar> E2eModel<S> {
    pub fn init(seed: u64, task: Task) -> Self {
        let mut store = ParamStore::new();
        let arch = E2eArch::new(&mut store, seed, task);
        E2eModel { store, arch }
    }

    pub fn save(&self, meta: CheckpointMeta, path: &Path) -> Result<CheckpointMeta> {
        let store32: ParamStore<Real> = self.store.cast();
        save_checkpoint(&store32, meta, path)
    }
}

impl E2eModel<Real> {
    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta)> {
        let (loaded, meta) = load_checkpoint(path)?;
        if meta.kind != "e2e" {
            return Err(Error::Checkpoint(format!(
                "expected e2e checkpoint, found kind {}",
                meta.kind
            )));
        }
        let task: Task = meta
            .extra
            .get("task")
            .ok_or_else(|| Error::Checkpoint("e2e checkpoint missing task".into()))?
            .parse()?;
        let mut model = E2eModel::init(0, task);
        assign_params(&mut model.store, &loaded)?;
        Ok((model, meta))
    }
}

/// Value-level forward with the spec's aux validation.
pub fn e2e_forward(
    model: &E2eModel<Real>,
    task: Task,
    patch: &ndarray::Array2<Real>,
    aux: &[Real],
) -> Result<Vec<Real>> {
    if task != model.arch.task {
        return Err(Error::Config(format!(
            "model trained for {}, asked for {}",
            model.arch.task.name(),
            task.name()
        )));
    }
    if patch.dim() != (PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::Shape(format!(
            "patch must be {PATCH_SIZE}x{PATCH_SIZE}"
        )));
    }
    if aux.len() != e2e_aux_width(task) {
        return Err(Error::Config(format!(
            "{} needs aux width {}, got {}",
            task.name(),
            e2e_aux_width(task),
            aux.len()
        )));
    }
    let mut x = ArrayD::zeros(IxDyn(&[1, 1, PATCH_SIZE, PATCH_SIZE]));
    for r in 0..PATCH_SIZE {
        for c in 0..PATCH_SIZE {
            x[[0, 0, r, c]] = patch[[r, c]];
        }
    }
    let mut a = ArrayD::zeros(IxDyn(&[1, aux.len()]));
    for (i, v) in aux.iter().enumerate() {
        a[[0, i]] = *v;
    }
    let mut s = Session::new(&model.store, false);
    let xv = s.tape.constant(x);
    let av = s.tape.constant(a);
    let y = model.arch.forward(&mut s, xv, av);
    Ok(s.tape.value(y).iter().cloned().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn parameter_budget_near_reported_total() {
        let model = E2eModel::<Real>::init(0, Task::Fkd);
        let n = model.store.scalar_count();
        assert!(
            (n as f64 - 11.47e6).abs() / 11.47e6 < 0.15,
            "e2e params {n}"
        );
    }

    #[test]
    fn forward_shapes_and_aux_validation() {
        let model = E2eModel::<Real>::init(1, Task::Fkd);
        let patch = Array2::from_elem((PATCH_SIZE, PATCH_SIZE), 0.1f32);
        let out = e2e_forward(&model, Task::Fkd, &patch, &[0.0; 8]).unwrap();
        assert_eq!(out.len(), 6);
        assert!(e2e_forward(&model, Task::Fkd, &patch, &[0.0; 6]).is_err());
        assert!(e2e_forward(&model, Task::Ikd, &patch, &[0.0; 6]).is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut model = E2eModel::<Real>::init(2, Task::Bc);
        let wid = model.store.id("head.fc4.w").unwrap();
        model.store.get_mut(wid).fill(0.0);
        let bid = model.store.id("head.fc4.b").unwrap();
        model.store.get_mut(bid).fill(0.0);
        let patch = Array2::from_elem((PATCH_SIZE, PATCH_SIZE), -0.2f32);
        let out = e2e_forward(&model, Task::Bc, &patch, &[1.0, 0.0, 0.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pr_output_is_squashed_patch() {
        let model = E2eModel::<Real>::init(3, Task::Pr);
        let patch = Array2::from_elem((PATCH_SIZE, PATCH_SIZE), 0.4f32);
        let out = e2e_forward(&model, Task::Pr, &patch, &[0.0; 8]).unwrap();
        assert_eq!(out.len(), PATCH_SIZE * PATCH_SIZE);
        assert!(out.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }
}
