//! Downstream task heads. Each consumes the 128-dim context vector plus its
//! declared auxiliary input and nothing else.
//!
//! Head MLPs follow the width sequence [128, 64, 32, 16, n]: the leading 128
//! is the input layer (the context width), widened by concatenated auxiliary
//! inputs, which keeps the frozen-mode trainable budget at ~0.011M for the
//! aux-free forward model.

use crate::ad::Var;
use crate::codec::{Codec, LATENT_DIM};
use crate::error::{Error, Result};
use crate::nn::{mse, Linear, ParamStore, Session};
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::sim::patch::PATCH_SIZE;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

/// Width sequence of the downstream MLPs; element 0 is the nominal input
/// width (= ctx), the rest are hidden widths before the task output.
pub const HEAD_WIDTHS: [usize; 4] = [128, 64, 32, 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Fkd,
    Ikd,
    Bc,
    Pr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Fkd => "fkd",
            Task::Ikd => "ikd",
            Task::Bc => "bc",
            Task::Pr => "pr",
        }
    }

    /// Width of the auxiliary input concatenated to ctx.
    pub fn aux_width(self) -> usize {
        match self {
            Task::Fkd => 0,
            Task::Ikd => 6, // desired pose delta in the frame of pose t
            Task::Bc => 3,  // relative goal position
            Task::Pr => 0,
        }
    }

    pub fn output_width(self) -> usize {
        match self {
            Task::Fkd => 6,
            Task::Ikd | Task::Bc => 2,
            Task::Pr => PATCH_SIZE * PATCH_SIZE,
        }
    }

    pub fn all() -> [Task; 4] {
        [Task::Fkd, Task::Ikd, Task::Bc, Task::Pr]
    }
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fkd" => Ok(Task::Fkd),
            "ikd" => Ok(Task::Ikd),
            "bc" => Ok(Task::Bc),
            "pr" => Ok(Task::Pr),
            other => Err(Error::Config(format!("unknown task {other}"))),
        }
    }
}

pub struct TaskHead {
    pub task: Task,
    layers: [Linear; 4],
}

impl TaskHead {
    /// Build a head for a task; errors for PR, which adds no parameters.
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, seed: u64, task: Task) -> Result<Self> {
        if task == Task::Pr {
            return Err(Error::Config(
                "patch reconstruction adds no trainable head".into(),
            ));
        }
        let mut rng = substream(seed, "head-init");
        let input = LATENT_DIM + task.aux_width();
        let dims = [input, HEAD_WIDTHS[1], HEAD_WIDTHS[2], HEAD_WIDTHS[3]];
        let layers = [
            Linear::new(store, &mut rng, "head.fc1", dims[0], dims[1]),
            Linear::new(store, &mut rng, "head.fc2", dims[1], dims[2]),
            Linear::new(store, &mut rng, "head.fc3", dims[2], dims[3]),
            Linear::new(store, &mut rng, "head.fc4", dims[3], task.output_width()),
        ];
        Ok(TaskHead { task, layers })
    }

    /// Full width sequence [input, 64, 32, 16, n].
    pub fn layer_widths(&self) -> Vec<usize> {
        vec![
            self.layers[0].in_dim,
            self.layers[0].out_dim,
            self.layers[1].out_dim,
            self.layers[2].out_dim,
            self.layers[3].out_dim,
        ]
    }

    /// `[B, 128 + aux] -> [B, n]`
    pub fn forward<S: Scalar>(&self, s: &mut Session<S>, x: Var) -> Var {
        let got = s.tape.value(x).shape()[1];
        let want = LATENT_DIM + self.task.aux_width();
        assert_eq!(got, want, "head input width {got}, expected {want}");
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h);
            if i + 1 < self.layers.len() {
                h = s.tape.relu(h);
            }
        }
        h
    }

    pub fn loss_graph<S: Scalar>(&self, s: &mut Session<S>, x: Var, targets: &Array2<S>) -> Var {
        let pred = self.forward(s, x);
        let t = s.tape.constant(targets.clone().into_dyn());
        mse(&mut s.tape, pred, t)
    }
}

fn check_width(name: &str, v: &Array1<impl Scalar>, want: usize) -> Result<()> {
    if v.len() != want {
        return Err(Error::Shape(format!(
            "{name} expects width {want}, got {}",
            v.len()
        )));
    }
    Ok(())
}

/// Concatenate ctx and aux rows into the head input matrix.
pub fn head_input<S: Scalar>(ctx: &Array2<S>, aux: Option<&Array2<S>>) -> Array2<S> {
    match aux {
        None => ctx.clone(),
        Some(a) => {
            assert_eq!(ctx.nrows(), a.nrows());
            let mut out = Array2::zeros((ctx.nrows(), ctx.ncols() + a.ncols()));
            for r in 0..ctx.nrows() {
                for c in 0..ctx.ncols() {
                    out[[r, c]] = ctx[[r, c]];
                }
                for c in 0..a.ncols() {
                    out[[r, ctx.ncols() + c]] = a[[r, c]];
                }
            }
            out
        }
    }
}

fn run_head<S: Scalar>(
    head: &TaskHead,
    store: &ParamStore<S>,
    input: Array2<S>,
) -> Array1<S> {
    let mut s = Session::new(store, false);
    let x = s.tape.constant(input.into_dyn());
    let y = head.forward(&mut s, x);
    let v = s.tape.value(y);
    v.to_shape(v.shape()[1]).unwrap().to_owned()
}

/// Forward kinodynamics: pose delta t -> t+1 in the frame of pose t, from the
/// context vector alone.
pub fn fkd<S: Scalar>(
    ctx: &Array1<S>,
    head: &TaskHead,
    store: &ParamStore<S>,
) -> Result<Array1<S>> {
    check_width("fkd ctx", ctx, LATENT_DIM)?;
    if head.task != Task::Fkd {
        return Err(Error::Config("head is not an fkd head".into()));
    }
    let input = ctx.clone().into_shape_with_order((1, LATENT_DIM)).unwrap();
    Ok(run_head(head, store, input))
}

/// Inverse kinodynamics: action achieving a desired next-pose delta.
pub fn ikd<S: Scalar>(
    ctx: &Array1<S>,
    desired_delta: &Array1<S>,
    head: &TaskHead,
    store: &ParamStore<S>,
) -> Result<Array1<S>> {
    check_width("ikd ctx", ctx, LATENT_DIM)?;
    check_width("ikd desired delta", desired_delta, 6)?;
    if head.task != Task::Ikd {
        return Err(Error::Config("head is not an ikd head".into()));
    }
    let ctx2 = ctx.clone().into_shape_with_order((1, LATENT_DIM)).unwrap();
    let aux = desired_delta.clone().into_shape_with_order((1, 6)).unwrap();
    Ok(run_head(head, store, head_input(&ctx2, Some(&aux))))
}

/// Cloned controller: action toward a relative goal (width 131 input); pass a
/// zero goal for the goal-free exploration mode.
pub fn bc<S: Scalar>(
    ctx: &Array1<S>,
    goal: &Array1<S>,
    head: &TaskHead,
    store: &ParamStore<S>,
) -> Result<Array1<S>> {
    check_width("bc ctx", ctx, LATENT_DIM)?;
    check_width("bc goal", goal, 3)?;
    if head.task != Task::Bc {
        return Err(Error::Config("head is not a bc head".into()));
    }
    let ctx2 = ctx.clone().into_shape_with_order((1, LATENT_DIM)).unwrap();
    let aux = goal.clone().into_shape_with_order((1, 3)).unwrap();
    Ok(run_head(head, store, head_input(&ctx2, Some(&aux))))
}

/// Patch reconstruction: decode a 128-vector through the frozen codec
/// decoder. No trainable parameters of its own.
pub fn pr<S: Scalar>(v: &Array1<S>, codec: &Codec<S>) -> Result<Array2<S>> {
    check_width("pr input", v, LATENT_DIM)?;
    codec.decode(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{gradient_check, max_rel_err};
    use crate::Real;
    use ndarray::ArrayD;

    #[test]
    fn widths_and_budgets() {
        for task in [Task::Fkd, Task::Ikd, Task::Bc] {
            let mut store = ParamStore::<Real>::new();
            let head = TaskHead::new(&mut store, 0, task).unwrap();
            let widths = head.layer_widths();
            assert_eq!(widths[1..4], [64, 32, 16]);
            assert_eq!(widths[0], 128 + task.aux_width());
            assert_eq!(widths[4], task.output_width());
            if task == Task::Fkd {
                assert_eq!(widths, vec![128, 64, 32, 16, 6]);
                let n = store.scalar_count();
                assert!(
                    (n as f64 - 0.011e6).abs() / 0.011e6 < 0.15,
                    "fkd head {n} params"
                );
            }
        }
        assert!(TaskHead::new(&mut ParamStore::<Real>::new(), 0, Task::Pr).is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let mut store = ParamStore::<Real>::new();
        let head = TaskHead::new(&mut store, 1, Task::Fkd).unwrap();
        let wid = store.id("head.fc4.w").unwrap();
        store.get_mut(wid).fill(0.0);
        let bid = store.id("head.fc4.b").unwrap();
        store.get_mut(bid).fill(0.0);
        let ctx = Array1::from_elem(LATENT_DIM, 0.3f32);
        let out = fkd(&ctx, &head, &store).unwrap();
        assert_eq!(out.len(), 6);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn io_widths_per_task() {
        let ctx = Array1::from_elem(LATENT_DIM, 0.1f32);
        let mut s1 = ParamStore::<Real>::new();
        let h1 = TaskHead::new(&mut s1, 2, Task::Ikd).unwrap();
        let delta = Array1::from_elem(6, 0.05f32);
        assert_eq!(ikd(&ctx, &delta, &h1, &s1).unwrap().len(), 2);
        let mut s2 = ParamStore::<Real>::new();
        let h2 = TaskHead::new(&mut s2, 3, Task::Bc).unwrap();
        let goal = Array1::from_elem(3, 1.0f32);
        assert_eq!(bc(&ctx, &goal, &h2, &s2).unwrap().len(), 2);
        // wrong widths error
        assert!(fkd(&Array1::<f32>::zeros(64), &h2, &s2).is_err());
        assert!(ikd(&ctx, &Array1::<f32>::zeros(5), &h1, &s1).is_err());
    }

    #[test]
    fn pr_is_codec_decode_composition() {
        let codec = Codec::<Real>::init(4);
        let v = Array1::from_shape_fn(LATENT_DIM, |i| (i as f32 * 0.01).sin());
        let a = pr(&v, &codec).unwrap();
        let b = codec.decode(&v).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (PATCH_SIZE, PATCH_SIZE));
        assert!(pr(&Array1::<f32>::zeros(64), &codec).is_err());
    }

    #[test]
    fn head_loss_gradchecks() {
        use rand::Rng;
        for task in [Task::Fkd, Task::Ikd, Task::Bc] {
            let mut store = ParamStore::<f64>::new();
            let head = TaskHead::new(&mut store, 5, task).unwrap();
            let mut rng = crate::rng::substream(6, "head-gc");
            let b = 4;
            let input = ArrayD::from_shape_fn(
                ndarray::IxDyn(&[b, LATENT_DIM + task.aux_width()]),
                |_| rng.gen::<f64>() - 0.5,
            );
            let targets =
                Array2::from_shape_fn((b, task.output_width()), |_| rng.gen::<f64>() - 0.5);
            let entries = gradient_check(
                &store,
                move |s| {
                    let x = s.tape.constant(input.clone());
                    head.loss_graph(s, x, &targets)
                },
                10,
                7,
            );
            assert!(max_rel_err(&entries) < 1e-4, "{task:?}: {entries:?}");
        }
    }
}
