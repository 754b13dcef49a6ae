//! Temporal fusion of fused BEV frames.
//!
//! Past frames are first re-expressed in the current ego frame
//! ([`calibrate_step`]). The temporal deformable alignment step then queries
//! both the calibrated running frame and the current frame with a query
//! built from their concatenation and adds the average of the two attended
//! maps to the current frame. [`naive_fuse`] is the concat-and-convolve
//! baseline; [`train_tda_offsets`] fits [`TdaParams`] by gradient descent
//! with backpropagation through the whole recurrence.

use crate::deform_attn::{deform_attn_grid, deform_attn_grid_backward, DeformAttnParams};
use crate::error::{shape_err, Error, Result};
use crate::geometry::{
    ego_motion_matrix, warp_bev, warp_bev_adjoint, BevFeature, BevSpec, EgoPose,
};
use crate::lgvt::reduce_pairs;
use crate::tensor::{concat_channels, conv2d, ConvParams, LinearParams, ParamRng, Tensor};
use nalgebra::Matrix3;

#[derive(Debug, Clone, PartialEq)]
pub struct TdaParams {
    /// `2C -> C`, applied to `[running | current]`.
    pub query_reduce: LinearParams,
    pub attn_prev: DeformAttnParams,
    pub attn_curr: DeformAttnParams,
    /// Use `attn_prev` for both attention branches.
    pub share_attention: bool,
}

impl TdaParams {
    pub fn init(channels: usize, heads: usize, points: usize, rng: &mut ParamRng) -> Result<Self> {
        Ok(Self {
            query_reduce: LinearParams::init(channels, 2 * channels, rng),
            attn_prev: DeformAttnParams::init(channels, heads, points, rng)?,
            attn_curr: DeformAttnParams::init(channels, heads, points, rng)?,
            share_attention: false,
        })
    }

    /// Both output projections zeroed: the step returns the current frame.
    pub fn residual_identity(
        channels: usize,
        heads: usize,
        points: usize,
        rng: &mut ParamRng,
    ) -> Result<Self> {
        let mut p = Self::init(channels, heads, points, rng)?;
        p.attn_prev.output_proj = LinearParams::zeros(channels, channels);
        p.attn_curr.output_proj = LinearParams::zeros(channels, channels);
        Ok(p)
    }

    /// Identity-style attention in both branches: each step returns
    /// `current + 0.5 * (running + current)` cell by cell.
    pub fn identity_style(
        channels: usize,
        heads: usize,
        points: usize,
        rng: &mut ParamRng,
    ) -> Result<Self> {
        Ok(Self {
            query_reduce: LinearParams::init(channels, 2 * channels, rng),
            attn_prev: DeformAttnParams::identity(channels, heads, points)?,
            attn_curr: DeformAttnParams::identity(channels, heads, points)?,
            share_attention: false,
        })
    }

    pub fn channels(&self) -> usize {
        self.attn_prev.channels()
    }

    fn curr_attn(&self) -> &DeformAttnParams {
        if self.share_attention {
            &self.attn_prev
        } else {
            &self.attn_curr
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        self.attn_prev.validate()?;
        self.attn_curr.validate()?;
        if self.attn_curr.channels() != c
            || self.query_reduce.in_dim() != 2 * c
            || self.query_reduce.out_dim() != c
        {
            return shape_err("TDA parameter dimensions are inconsistent");
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            query_reduce: self.query_reduce.zeros_like(),
            attn_prev: self.attn_prev.zeros_like(),
            attn_curr: self.attn_curr.zeros_like(),
            share_attention: self.share_attention,
        }
    }

    pub fn num_params(&self) -> usize {
        self.query_reduce.num_params() + self.attn_prev.num_params() + self.attn_curr.num_params()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        self.query_reduce.flatten_into(&mut v);
        self.attn_prev.flatten_into(&mut v);
        self.attn_curr.flatten_into(&mut v);
        v
    }

    pub fn assign(&mut self, src: &[f64]) -> Result<()> {
        if src.len() != self.num_params() {
            return shape_err(format!(
                "{} values for {} TDA parameters",
                src.len(),
                self.num_params()
            ));
        }
        let rest = self.query_reduce.assign_from(src);
        let rest = self.attn_prev.assign_from(rest);
        self.attn_curr.assign_from(rest);
        Ok(())
    }

    pub fn axpy(&mut self, alpha: f64, other: &TdaParams) {
        self.query_reduce.axpy(alpha, &other.query_reduce);
        self.attn_prev.axpy(alpha, &other.attn_prev);
        self.attn_curr.axpy(alpha, &other.attn_curr);
    }
}

/// Fused BEV frames, oldest first, with the ego pose of each frame.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Vec<BevFeature>,
    poses: Vec<EgoPose>,
}

impl FrameSequence {
    pub fn new(frames: Vec<BevFeature>, poses: Vec<EgoPose>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidArgument(
                "a frame sequence needs at least one frame".into(),
            ));
        }
        if frames.len() != poses.len() {
            return shape_err(format!("{} frames but {} poses", frames.len(), poses.len()));
        }
        if frames.iter().any(|f| !f.same_layout(&frames[0])) {
            return shape_err("frames do not share one BEV layout");
        }
        Ok(Self { frames, poses })
    }

    pub fn frames(&self) -> &[BevFeature] {
        &self.frames
    }

    pub fn poses(&self) -> &[EgoPose] {
        &self.poses
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn spec(&self) -> &BevSpec {
        self.frames[0].spec()
    }

    pub fn channels(&self) -> usize {
        self.frames[0].channels()
    }
}

/// Re-expresses the previous frame in the current ego frame.
pub fn calibrate_step(
    f_prev: &BevFeature,
    pose_prev: &EgoPose,
    pose_curr: &EgoPose,
) -> Result<BevFeature> {
    warp_bev(f_prev, &ego_motion_matrix(pose_prev, pose_curr))
}

/// Each cell's own normalized grid coordinate.
pub fn self_reference_points(spec: &BevSpec) -> Tensor {
    let norm = |k: usize, n: usize| {
        if n > 1 {
            k as f64 / (n - 1) as f64
        } else {
            0.0
        }
    };
    Tensor::from_fn(&[spec.cells_x, spec.cells_y, 2], |ix| {
        if ix[2] == 0 {
            norm(ix[0], spec.cells_x)
        } else {
            norm(ix[1], spec.cells_y)
        }
    })
}

fn check_step(prev: &BevFeature, curr: &BevFeature, params: &TdaParams) -> Result<()> {
    if !prev.same_layout(curr) {
        return shape_err("TDA inputs do not share one BEV layout");
    }
    if curr.channels() != params.channels() {
        return shape_err(format!(
            "frames have {} channels, TDA expects {}",
            curr.channels(),
            params.channels()
        ));
    }
    params.validate()
}

/// One alignment step on two frames already in the current ego frame.
pub fn tda_step(
    f_prev_update: &BevFeature,
    f_curr: &BevFeature,
    params: &TdaParams,
) -> Result<BevFeature> {
    check_step(f_prev_update, f_curr, params)?;
    let spec = f_curr.spec();
    let q = reduce_pairs(f_prev_update.data(), f_curr.data(), &params.query_reduce);
    let refs = self_reference_points(spec);
    let from_prev = deform_attn_grid(&q, &refs, &f_prev_update.to_chw(), &params.attn_prev)?;
    let from_curr = deform_attn_grid(&q, &refs, &f_curr.to_chw(), params.curr_attn())?;
    let mut out = f_curr.data().clone();
    for ((o, a), b) in out
        .data_mut()
        .iter_mut()
        .zip(from_prev.data())
        .zip(from_curr.data())
    {
        *o += 0.5 * (a + b);
    }
    BevFeature::new(spec.clone(), out)
}

#[derive(Debug, Clone)]
pub struct TdaStepGrads {
    pub prev: BevFeature,
    pub curr: BevFeature,
    pub params: TdaParams,
}

pub fn tda_step_backward(
    f_prev_update: &BevFeature,
    f_curr: &BevFeature,
    params: &TdaParams,
    grad_out: &BevFeature,
) -> Result<TdaStepGrads> {
    check_step(f_prev_update, f_curr, params)?;
    if !grad_out.same_layout(f_curr) {
        return shape_err("gradient layout differs from the TDA output");
    }
    let spec = f_curr.spec();
    let c = params.channels();
    let q = reduce_pairs(f_prev_update.data(), f_curr.data(), &params.query_reduce);
    let refs = self_reference_points(spec);
    let half = grad_out.data().scaled(0.5);

    let gp =
        deform_attn_grid_backward(&q, &refs, &f_prev_update.to_chw(), &params.attn_prev, &half)?;
    let gc = deform_attn_grid_backward(&q, &refs, &f_curr.to_chw(), params.curr_attn(), &half)?;

    let mut grads = params.zeros_like();
    grads.attn_prev = gp.params;
    if params.share_attention {
        grads.attn_prev.axpy(1.0, &gc.params);
    } else {
        grads.attn_curr = gc.params;
    }

    let mut g_prev = BevFeature::from_chw(spec, &gp.value_map)?;
    let mut g_curr = BevFeature::from_chw(spec, &gc.value_map)?;
    g_curr.data_mut().axpy(1.0, grad_out.data());

    let mut gq = gp.queries;
    gq.axpy(1.0, &gc.queries);
    let mut cat = vec![0.0; 2 * c];
    let mut g_cat = vec![0.0; 2 * c];
    for n in 0..spec.num_cells() {
        let g = &gq.data()[n * c..(n + 1) * c];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        cat[..c].copy_from_slice(&f_prev_update.data().data()[n * c..(n + 1) * c]);
        cat[c..].copy_from_slice(&f_curr.data().data()[n * c..(n + 1) * c]);
        g_cat.iter_mut().for_each(|v| *v = 0.0);
        params
            .query_reduce
            .backward_into(&cat, g, &mut grads.query_reduce, &mut g_cat);
        for k in 0..c {
            g_prev.data_mut().data_mut()[n * c + k] += g_cat[k];
            g_curr.data_mut().data_mut()[n * c + k] += g_cat[c + k];
        }
    }
    Ok(TdaStepGrads {
        prev: g_prev,
        curr: g_curr,
        params: grads,
    })
}

/// Recurrent temporal fusion; the result is in the last frame's ego frame.
pub fn temporal_fuse(seq: &FrameSequence, params: &TdaParams) -> Result<BevFeature> {
    let mut running = seq.frames[0].clone();
    for t in 1..seq.len() {
        let cal = calibrate_step(&running, &seq.poses[t - 1], &seq.poses[t])?;
        running = tda_step(&cal, &seq.frames[t], params)?;
    }
    Ok(running)
}

/// Calibrates every frame into the last frame's ego frame by chaining
/// [`calibrate_step`], concatenates them oldest first and applies `conv`.
pub fn naive_fuse(seq: &FrameSequence, conv: &ConvParams) -> Result<BevFeature> {
    let c = seq.channels();
    if conv.in_channels() != seq.len() * c {
        return shape_err(format!(
            "naive fusion conv takes {} channels, {} frames of {c} give {}",
            conv.in_channels(),
            seq.len(),
            seq.len() * c
        ));
    }
    let last = seq.len() - 1;
    let mut stacked: Option<Tensor> = None;
    for k in 0..seq.len() {
        let mut f = seq.frames[k].clone();
        for t in k..last {
            f = calibrate_step(&f, &seq.poses[t], &seq.poses[t + 1])?;
        }
        let chw = f.to_chw();
        stacked = Some(match stacked {
            None => chw,
            Some(s) => concat_channels(&s, &chw)?,
        });
    }
    let out = conv2d(&stacked.expect("at least one frame"), conv)?;
    BevFeature::from_chw(seq.spec(), &out)
}

/// One training sample: observed frames and the clean current-frame target.
#[derive(Debug, Clone)]
pub struct TdaExample {
    pub seq: FrameSequence,
    pub target: BevFeature,
}

fn mse(out: &BevFeature, target: &BevFeature) -> Result<f64> {
    if !out.same_layout(target) {
        return shape_err("target layout differs from the fused output");
    }
    let n = out.data().len() as f64;
    Ok(out
        .data()
        .data()
        .iter()
        .zip(target.data().data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn tda_loss(example: &TdaExample, params: &TdaParams) -> Result<f64> {
    mse(&temporal_fuse(&example.seq, params)?, &example.target)
}

/// Mean-squared error of [`temporal_fuse`] against the target and its
/// gradient with respect to every parameter, backpropagated through all
/// alignment steps and calibrations.
pub fn tda_loss_and_grad(example: &TdaExample, params: &TdaParams) -> Result<(f64, TdaParams)> {
    let seq = &example.seq;
    let mut calibrated = Vec::with_capacity(seq.len());
    let mut motions: Vec<Matrix3<f64>> = Vec::with_capacity(seq.len());
    let mut running = seq.frames[0].clone();
    for t in 1..seq.len() {
        let m = ego_motion_matrix(&seq.poses[t - 1], &seq.poses[t]);
        let cal = warp_bev(&running, &m)?;
        running = tda_step(&cal, &seq.frames[t], params)?;
        calibrated.push(cal);
        motions.push(m);
    }
    let loss = mse(&running, &example.target)?;
    let n = running.data().len() as f64;
    let mut g = running.clone();
    for (gv, tv) in g
        .data_mut()
        .data_mut()
        .iter_mut()
        .zip(example.target.data().data())
    {
        *gv = 2.0 * (*gv - tv) / n;
    }
    let mut grads = params.zeros_like();
    for t in (1..seq.len()).rev() {
        let step = tda_step_backward(&calibrated[t - 1], &seq.frames[t], params, &g)?;
        grads.axpy(1.0, &step.params);
        g = warp_bev_adjoint(&step.prev, &motions[t - 1])?;
    }
    Ok((loss, grads))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: TdaParams,
    /// Batch loss before each update.
    pub history: Vec<f64>,
    /// Batch loss after the last update.
    pub final_loss: f64,
}

fn batch_loss_and_grad(examples: &[TdaExample], params: &TdaParams) -> Result<(f64, TdaParams)> {
    let mut total = 0.0;
    let mut grads = params.zeros_like();
    for ex in examples {
        let (l, g) = tda_loss_and_grad(ex, params)?;
        total += l;
        grads.axpy(1.0, &g);
    }
    let k = examples.len() as f64;
    let mut scaled = grads.zeros_like();
    scaled.axpy(1.0 / k, &grads);
    Ok((total / k, scaled))
}

pub fn batch_loss(examples: &[TdaExample], params: &TdaParams) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += tda_loss(ex, params)?;
    }
    Ok(total / examples.len() as f64)
}

/// Full-batch gradient descent on the mean [`tda_loss`] over `examples`.
pub fn train_tda_offsets(
    examples: &[TdaExample],
    params: &TdaParams,
    steps: usize,
    lr: f64,
) -> Result<TrainOutcome> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs at least one example".into(),
        ));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    let mut params = params.clone();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = batch_loss_and_grad(examples, &params)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {step}"
            )));
        }
        history.push(loss);
        params.axpy(-lr, &grads);
    }
    let final_loss = batch_loss(examples, &params)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss {final_loss} after {steps} steps"
        )));
    }
    Ok(TrainOutcome {
        params,
        history,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deform_attn::deform_attn;
    use crate::tensor::{grad_check, seeded_rng};

    fn spec(n: usize) -> BevSpec {
        BevSpec::centered(n, 0.5, vec![1.0]).unwrap()
    }

    fn random_bev(spec: &BevSpec, c: usize, rng: &mut ParamRng) -> BevFeature {
        BevFeature::new(
            spec.clone(),
            Tensor::random_uniform(&[spec.cells_x, spec.cells_y, c], 1.0, rng),
        )
        .unwrap()
    }

    fn random_params(c: usize, rng: &mut ParamRng) -> TdaParams {
        TdaParams {
            query_reduce: LinearParams::init(c, 2 * c, rng),
            attn_prev: DeformAttnParams::random(c, 2, 2, 0.8, rng).unwrap(),
            attn_curr: DeformAttnParams::random(c, 2, 2, 0.8, rng).unwrap(),
            share_attention: false,
        }
    }

    #[test]
    fn identical_poses_calibrate_exactly() {
        let mut rng = seeded_rng(1);
        let f = random_bev(&spec(6), 3, &mut rng);
        let p = EgoPose::new(1.3, -2.0, 0.4);
        assert_eq!(calibrate_step(&f, &p, &p).unwrap(), f);
    }

    #[test]
    fn zero_output_projections_return_current() {
        let mut rng = seeded_rng(2);
        let s = spec(5);
        let prev = random_bev(&s, 4, &mut rng);
        let curr = random_bev(&s, 4, &mut rng);
        let p = TdaParams::residual_identity(4, 2, 2, &mut rng).unwrap();
        assert_eq!(tda_step(&prev, &curr, &p).unwrap(), curr);
    }

    #[test]
    fn zero_inputs_zero_biases_give_zero() {
        let mut rng = seeded_rng(3);
        let s = spec(4);
        let mut p = random_params(4, &mut rng);
        p.query_reduce.bias = Tensor::zeros(&[4]);
        for a in [&mut p.attn_prev, &mut p.attn_curr] {
            a.value_proj.bias = Tensor::zeros(&[4]);
            a.output_proj.bias = Tensor::zeros(&[4]);
        }
        let z = BevFeature::zeros(&s, 4);
        let out = tda_step(&z, &z, &p).unwrap();
        assert!(out.data().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn step_matches_per_cell_composition() {
        let mut rng = seeded_rng(4);
        let s = BevSpec::new(5, 4, 0.5, [0.0, 0.0], vec![1.0]).unwrap();
        let prev = random_bev(&s, 4, &mut rng);
        let curr = random_bev(&s, 4, &mut rng);
        let p = random_params(4, &mut rng);
        let out = tda_step(&prev, &curr, &p).unwrap();
        let (pm, cm) = (prev.to_chw(), curr.to_chw());
        for i in 0..5 {
            for j in 0..4 {
                let cat: Vec<f64> = prev
                    .cell(i, j)
                    .iter()
                    .chain(curr.cell(i, j))
                    .copied()
                    .collect();
                let q = p.query_reduce.apply(&cat).unwrap();
                let r = [i as f64 / 4.0, j as f64 / 3.0];
                let a = deform_attn(&q, r, &pm, &p.attn_prev).unwrap();
                let b = deform_attn(&q, r, &cm, &p.attn_curr).unwrap();
                for k in 0..4 {
                    let want = curr.cell(i, j)[k] + 0.5 * (a[k] + b[k]);
                    assert!((out.cell(i, j)[k] - want).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn single_frame_is_identity() {
        let mut rng = seeded_rng(5);
        let f = random_bev(&spec(5), 2, &mut rng);
        let seq = FrameSequence::new(vec![f.clone()], vec![EgoPose::new(0.0, 0.0, 0.0)]).unwrap();
        let p = random_params(2, &mut rng);
        assert_eq!(temporal_fuse(&seq, &p).unwrap(), f);
        let naive = naive_fuse(&seq, &ConvParams::center_delta(2, 2, 0, 1.0)).unwrap();
        assert_eq!(naive, f);
    }

    #[test]
    fn fixed_point_with_residual_identity() {
        let mut rng = seeded_rng(6);
        let f = random_bev(&spec(5), 2, &mut rng);
        let pose = EgoPose::new(0.5, 0.1, 0.2);
        let seq = FrameSequence::new(vec![f.clone(); 4], vec![pose; 4]).unwrap();
        let p = TdaParams::residual_identity(2, 1, 2, &mut rng).unwrap();
        assert_eq!(temporal_fuse(&seq, &p).unwrap(), f);
    }

    #[test]
    fn sequence_validation() {
        let f = BevFeature::zeros(&spec(4), 2);
        let g = BevFeature::zeros(&spec(5), 2);
        let p = EgoPose::new(0.0, 0.0, 0.0);
        assert!(FrameSequence::new(vec![], vec![]).is_err());
        assert!(FrameSequence::new(vec![f.clone()], vec![p, p]).is_err());
        assert!(FrameSequence::new(vec![f, g], vec![p, p]).is_err());
    }

    #[test]
    fn naive_conv_channel_check() {
        let f = BevFeature::zeros(&spec(4), 2);
        let p = EgoPose::new(0.0, 0.0, 0.0);
        let seq = FrameSequence::new(vec![f.clone(), f], vec![p, p]).unwrap();
        assert!(naive_fuse(&seq, &ConvParams::zeros(2, 2)).is_err());
        assert!(naive_fuse(&seq, &ConvParams::block_average(2, 2)).is_ok());
    }

    #[test]
    fn step_backward_matches_finite_differences() {
        let mut rng = seeded_rng(7);
        let s = spec(5);
        let prev = random_bev(&s, 4, &mut rng);
        let curr = random_bev(&s, 4, &mut rng);
        let p = random_params(4, &mut rng);
        let g = random_bev(&s, 4, &mut rng);
        let n = prev.data().len();
        let mut theta = prev.data().data().to_vec();
        theta.extend_from_slice(curr.data().data());
        theta.extend(p.flatten());
        let err = grad_check(
            |v: &[f64]| {
                let pf = BevFeature::new(
                    s.clone(),
                    Tensor::new(vec![5, 5, 4], v[..n].to_vec()).unwrap(),
                )
                .unwrap();
                let cf = BevFeature::new(
                    s.clone(),
                    Tensor::new(vec![5, 5, 4], v[n..2 * n].to_vec()).unwrap(),
                )
                .unwrap();
                let mut pp = p.clone();
                pp.assign(&v[2 * n..]).unwrap();
                let out = tda_step(&pf, &cf, &pp).unwrap();
                let val = out
                    .data()
                    .data()
                    .iter()
                    .zip(g.data().data())
                    .map(|(a, b)| a * b)
                    .sum();
                let gr = tda_step_backward(&pf, &cf, &pp, &g).unwrap();
                let mut grad = gr.prev.data().data().to_vec();
                grad.extend_from_slice(gr.curr.data().data());
                grad.extend(gr.params.flatten());
                (val, grad)
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn loss_gradient_through_recurrence() {
        let mut rng = seeded_rng(8);
        let s = spec(6);
        let frames: Vec<_> = (0..3).map(|_| random_bev(&s, 2, &mut rng)).collect();
        let poses = vec![
            EgoPose::new(0.0, 0.0, 0.0),
            EgoPose::new(0.31, 0.12, 0.05),
            EgoPose::new(0.55, 0.2, 0.11),
        ];
        let ex = TdaExample {
            seq: FrameSequence::new(frames, poses).unwrap(),
            target: random_bev(&s, 2, &mut rng),
        };
        let mut p = random_params(2, &mut rng);
        p.share_attention = true;
        let theta = p.flatten();
        let err = grad_check(
            |v: &[f64]| {
                let mut pp = p.clone();
                pp.assign(v).unwrap();
                let (l, g) = tda_loss_and_grad(&ex, &pp).unwrap();
                (l, g.flatten())
            },
            &theta,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn zero_steps_returns_params_unchanged() {
        let mut rng = seeded_rng(9);
        let s = spec(4);
        let f = random_bev(&s, 2, &mut rng);
        let ex = TdaExample {
            seq: FrameSequence::new(
                vec![f.clone(), f.clone()],
                vec![EgoPose::new(0.0, 0.0, 0.0); 2],
            )
            .unwrap(),
            target: f,
        };
        let p = TdaParams::init(2, 1, 2, &mut rng).unwrap();
        let out = train_tda_offsets(&[ex.clone()], &p, 0, 0.1).unwrap();
        assert_eq!(out.params, p);
        assert!(out.history.is_empty());
        assert!(train_tda_offsets(&[ex.clone()], &p, 1, 0.0).is_err());
        assert!(train_tda_offsets(&[], &p, 1, 0.1).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut rng = seeded_rng(10);
        let s = spec(4);
        let f = random_bev(&s, 2, &mut rng);
        let ex = TdaExample {
            seq: FrameSequence::new(
                vec![f.clone(), f.clone()],
                vec![EgoPose::new(0.0, 0.0, 0.0); 2],
            )
            .unwrap(),
            target: f,
        };
        let p = TdaParams::init(2, 1, 2, &mut rng).unwrap();
        let r = train_tda_offsets(&[ex], &p, 200, 1e6);
        assert!(matches!(r, Err(Error::NonFinite(_))), "{r:?}");
    }
}
