//! Self-check suites runnable from a release binary.
//!
//! Every check is seeded, so a suite either always passes or always fails
//! for a given build. The oracles here are deliberately naive loops written
//! independently of the optimized kernels they are compared against.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::Rng;

use crate::deform_attn::{
    deform_attn, deform_attn_backward, deform_attn_grid, deform_attn_grid_sequential,
    DeformAttnParams,
};
use crate::error::Error;
use crate::geometry::{
    ego_motion_matrix, project_point, warp_bev, warp_bev_adjoint, BevFeature, BevSpec, CameraModel,
    EgoPose,
};
use crate::lgvt::init_camera_bev;
use crate::synthetic::{
    default_rig, default_spec, render_image_features, render_lidar_bev, Scene, SceneBox,
};
use crate::tda::{tda_loss_and_grad, temporal_fuse, FrameSequence, TdaExample, TdaParams};
use crate::tensor::{
    bilinear_sample, bilinear_sample_backward, conv2d, grad_check, linear_apply, seeded_rng,
    softmax, ConvParams, LinearParams, ParamRng, Tensor,
};

pub const ORACLE_TOL: f64 = 1e-12;
pub const ATTN_ORACLE_TOL: f64 = 1e-10;
pub const GRAD_TOL: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-5;
pub const PROJECTION_TOL: f64 = 1e-9;
pub const EGO_LAW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Oracles,
    Gradients,
    Geometry,
    Properties,
    All,
}

impl Suite {
    pub const NAMES: [&'static str; 5] = ["oracles", "gradients", "geometry", "properties", "all"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "oracles" => Ok(Suite::Oracles),
            "gradients" => Ok(Suite::Gradients),
            "geometry" => Ok(Suite::Geometry),
            "properties" => Ok(Suite::Properties),
            "all" => Ok(Suite::All),
            other => Err(Error::InvalidArgument(format!(
                "unknown suite `{other}` (expected one of {})",
                Suite::NAMES.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {}/{}: {}", self.suite, self.name, self.detail)
    }
}

fn check(suite: &'static str, name: &'static str, passed: bool, detail: String) -> Check {
    Check {
        suite,
        name,
        passed,
        detail,
    }
}

/// Worst error against a tolerance, with an error result counting as failure.
fn bounded(
    suite: &'static str,
    name: &'static str,
    r: crate::Result<(f64, usize)>,
    tol: f64,
) -> Check {
    match r {
        Ok((err, cases)) => check(
            suite,
            name,
            err <= tol,
            format!("max error {err:.3e} over {cases} cases (tol {tol:.0e})"),
        ),
        Err(e) => check(suite, name, false, format!("error: {e}")),
    }
}

pub fn run(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Oracles => oracle_checks(),
        Suite::Gradients => gradient_checks(),
        Suite::Geometry => geometry_checks(),
        Suite::Properties => property_checks(),
        Suite::All => {
            let mut all = oracle_checks();
            all.extend(gradient_checks());
            all.extend(geometry_checks());
            all.extend(property_checks());
            all
        }
    }
}

// ---------------------------------------------------------------- oracles

fn loop_linear(l: &LinearParams, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; l.out_dim()];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = l.bias.get(&[o]);
        for (i, x) in v.iter().enumerate() {
            acc += l.weight.get(&[o, i]) * x;
        }
        *slot = acc;
    }
    out
}

fn loop_bilinear(map: &Tensor, x: f64, y: f64) -> Vec<f64> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (x0, y0) = (x.floor(), y.floor());
    let at = |k: usize, xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi > (w - 1) as f64 || yi > (h - 1) as f64 {
            0.0
        } else {
            map.get(&[k, yi as usize, xi as usize])
        }
    };
    (0..c)
        .map(|k| {
            (x0 + 1.0 - x) * (y0 + 1.0 - y) * at(k, x0, y0)
                + (x - x0) * (y0 + 1.0 - y) * at(k, x0 + 1.0, y0)
                + (x0 + 1.0 - x) * (y - y0) * at(k, x0, y0 + 1.0)
                + (x - x0) * (y - y0) * at(k, x0 + 1.0, y0 + 1.0)
        })
        .collect()
}

fn loop_conv(input: &Tensor, p: &ConvParams) -> Tensor {
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let co = p.out_channels();
    Tensor::from_fn(&[co, h, w], |ix| {
        let (o, r, c) = (ix[0], ix[1] as isize, ix[2] as isize);
        let mut acc = p.bias.get(&[o]);
        for k in 0..ci {
            for ky in 0..3isize {
                for kx in 0..3isize {
                    let (sr, sc) = (r + ky - 1, c + kx - 1);
                    if sr >= 0 && sc >= 0 && sr < h as isize && sc < w as isize {
                        acc += p.kernel.get(&[o, k, ky as usize, kx as usize])
                            * input.get(&[k, sr as usize, sc as usize]);
                    }
                }
            }
        }
        acc
    })
}

/// Per-head, per-point loop over the definition of deformable attention.
fn loop_deform_attn(query: &[f64], r: [f64; 2], map: &Tensor, p: &DeformAttnParams) -> Vec<f64> {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let projected = Tensor::from_fn(&[c, h, w], |ix| {
        let px: Vec<f64> = (0..c).map(|k| map.get(&[k, ix[1], ix[2]])).collect();
        loop_linear(&p.value_proj, &px)[ix[0]]
    });
    let off = loop_linear(&p.offset_proj, query);
    let logits = loop_linear(&p.weight_proj, query);
    let dh = c / p.heads;
    let mut merged = vec![0.0; c];
    for head in 0..p.heads {
        let row = &logits[head * p.points..(head + 1) * p.points];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|l| (l - m).exp()).sum();
        for pt in 0..p.points {
            let k = head * p.points + pt;
            let a = (row[pt] - m).exp() / z;
            let sx = r[0] * (w - 1) as f64 + off[2 * k];
            let sy = r[1] * (h - 1) as f64 + off[2 * k + 1];
            let s = loop_bilinear(&projected, sx, sy);
            for d in head * dh..(head + 1) * dh {
                merged[d] += a * s[d];
            }
        }
    }
    loop_linear(&p.output_proj, &merged)
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn random_coord(extent: usize, rng: &mut ParamRng) -> f64 {
    rng.random_range(-1.5..extent as f64 + 0.5)
}

pub fn deform_attn_oracle(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let points = [1, 4][rng.random_range(0..2)];
        let c = heads * rng.random_range(1..=3);
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let p = DeformAttnParams::random(c, heads, points, 1.5, &mut rng)?;
        let map = Tensor::random_uniform(&[c, h, w], 1.0, &mut rng);
        let q: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = [rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1)];
        let got = deform_attn(&q, r, &map, &p)?;
        worst = worst.max(max_diff(&got, &loop_deform_attn(&q, r, &map, &p)));
    }
    Ok((worst, cases))
}

pub fn bilinear_oracle(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (c, h, w) = (
            rng.random_range(1..4),
            rng.random_range(1..12),
            rng.random_range(1..12),
        );
        let map = Tensor::random_uniform(&[c, h, w], 2.0, &mut rng);
        for _ in 0..8 {
            let (x, y) = (random_coord(w, &mut rng), random_coord(h, &mut rng));
            worst = worst.max(max_diff(
                &bilinear_sample(&map, x, y)?,
                &loop_bilinear(&map, x, y),
            ));
        }
        // integer nodes exercise the floor-cell convention
        let (x, y) = (rng.random_range(0..w) as f64, rng.random_range(0..h) as f64);
        worst = worst.max(max_diff(
            &bilinear_sample(&map, x, y)?,
            &loop_bilinear(&map, x, y),
        ));
    }
    Ok((worst, cases * 9))
}

pub fn conv_oracle(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (ci, co) = (rng.random_range(1..5), rng.random_range(1..5));
        let (h, w) = (rng.random_range(1..10), rng.random_range(1..10));
        let input = Tensor::random_uniform(&[ci, h, w], 1.0, &mut rng);
        let p = ConvParams::init(co, ci, &mut rng);
        let got = conv2d(&input, &p)?;
        worst = worst.max(got.max_abs_diff(&loop_conv(&input, &p)));
    }
    Ok((worst, cases))
}

pub fn linear_oracle(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (i, o) = (rng.random_range(1..20), rng.random_range(1..20));
        let p = LinearParams::init(o, i, &mut rng);
        let v: Vec<f64> = (0..i).map(|_| rng.random_range(-3.0..3.0)).collect();
        worst = worst.max(max_diff(&linear_apply(&p, &v)?, &loop_linear(&p, &v)));
    }
    Ok((worst, cases))
}

pub fn oracle_checks() -> Vec<Check> {
    const S: &str = "oracles";
    vec![
        bounded(
            S,
            "deform_attn_vs_loop",
            deform_attn_oracle(50, 11),
            ATTN_ORACLE_TOL,
        ),
        bounded(
            S,
            "bilinear_sample_vs_loop",
            bilinear_oracle(50, 12),
            ORACLE_TOL,
        ),
        bounded(S, "conv2d_vs_loop", conv_oracle(30, 13), ORACLE_TOL),
        bounded(S, "linear_apply_vs_loop", linear_oracle(50, 14), ORACLE_TOL),
    ]
}

// -------------------------------------------------------------- gradients

/// Coordinate at least 0.05 px away from any integer, where bilinear
/// sampling is smooth.
fn smooth_coord(extent: usize, rng: &mut ParamRng) -> f64 {
    rng.random_range(-1..extent as i64) as f64 + rng.random_range(0.05..0.95)
}

pub fn bilinear_gradients(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (c, h, w) = (
            rng.random_range(1..4),
            rng.random_range(2..8),
            rng.random_range(2..8),
        );
        let map = Tensor::random_uniform(&[c, h, w], 1.0, &mut rng);
        let g: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut theta = map.data().to_vec();
        theta.push(smooth_coord(w, &mut rng));
        theta.push(smooth_coord(h, &mut rng));
        let n = map.len();
        let err = grad_check(
            |v: &[f64]| {
                let m = Tensor::new(map.shape().to_vec(), v[..n].to_vec()).expect("same shape");
                let out = bilinear_sample(&m, v[n], v[n + 1]).expect("finite coords");
                let gr = bilinear_sample_backward(&m, v[n], v[n + 1], &g).expect("finite coords");
                let mut grad = gr.feature.into_data();
                grad.push(gr.x);
                grad.push(gr.y);
                (dot(&out, &g), grad)
            },
            &theta,
            GRAD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok((worst, cases))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn deform_attn_gradients(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let heads = [1, 2][rng.random_range(0..2)];
        let points = rng.random_range(1..4);
        let c = heads * rng.random_range(1..3);
        let (h, w) = (rng.random_range(3..8), rng.random_range(3..8));
        let p = DeformAttnParams::random(c, heads, points, 0.8, &mut rng)?;
        let map = Tensor::random_uniform(&[c, h, w], 1.0, &mut rng);
        let q: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let r = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        let g: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut theta = q.clone();
        theta.extend_from_slice(map.data());
        p.flatten_into(&mut theta);
        let (nq, nm) = (c, map.len());
        let unpack = |v: &[f64]| {
            let m = Tensor::new(map.shape().to_vec(), v[nq..nq + nm].to_vec()).expect("same shape");
            let mut pp = p.clone();
            pp.assign_from(&v[nq + nm..]);
            (v[..nq].to_vec(), m, pp)
        };
        let err = grad_check(
            |v: &[f64]| {
                let (qq, m, pp) = unpack(v);
                let out = deform_attn(&qq, r, &m, &pp).expect("valid shapes");
                let gr = deform_attn_backward(&qq, r, &m, &pp, &g).expect("valid shapes");
                let mut grad = gr.query;
                grad.extend_from_slice(gr.value_map.data());
                gr.params.flatten_into(&mut grad);
                (dot(&out, &g), grad)
            },
            &theta,
            GRAD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok((worst, cases))
}

fn random_bev(spec: &BevSpec, c: usize, rng: &mut ParamRng) -> BevFeature {
    BevFeature::new(
        spec.clone(),
        Tensor::random_uniform(&[spec.cells_x, spec.cells_y, c], 1.0, rng),
    )
    .expect("matching extents")
}

pub fn tda_loss_gradients(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let c = 2;
        let spec = BevSpec::centered(rng.random_range(4..7), 0.5, vec![1.0])?;
        let t = rng.random_range(1..4);
        let frames: Vec<_> = (0..t).map(|_| random_bev(&spec, c, &mut rng)).collect();
        let mut poses = vec![EgoPose::new(0.0, 0.0, 0.0)];
        for k in 1..t {
            let last = poses[k - 1];
            poses.push(EgoPose::new(
                last.x + rng.random_range(-0.4..0.4),
                last.y + rng.random_range(-0.4..0.4),
                last.yaw + rng.random_range(-0.1..0.1),
            ));
        }
        let ex = TdaExample {
            seq: FrameSequence::new(frames, poses)?,
            target: random_bev(&spec, c, &mut rng),
        };
        let heads = [1, 2][rng.random_range(0..2)];
        let params = TdaParams {
            query_reduce: LinearParams::init(c, 2 * c, &mut rng),
            attn_prev: DeformAttnParams::random(c, heads, 2, 0.8, &mut rng)?,
            attn_curr: DeformAttnParams::random(c, heads, 2, 0.8, &mut rng)?,
            share_attention: case % 3 == 2,
        };
        let theta = params.flatten();
        let err = grad_check(
            |v: &[f64]| {
                let mut pp = params.clone();
                pp.assign(v).expect("same length");
                let (l, g) = tda_loss_and_grad(&ex, &pp).expect("valid example");
                (l, g.flatten())
            },
            &theta,
            GRAD_EPS,
        )?;
        worst = worst.max(err);
    }
    Ok((worst, cases))
}

pub fn gradient_checks() -> Vec<Check> {
    const S: &str = "gradients";
    vec![
        bounded(
            S,
            "bilinear_sample_backward",
            bilinear_gradients(12, 21),
            GRAD_TOL,
        ),
        bounded(
            S,
            "deform_attn_backward",
            deform_attn_gradients(12, 22),
            GRAD_TOL,
        ),
        bounded(S, "tda_loss_backward", tda_loss_gradients(10, 23), GRAD_TOL),
    ]
}

// --------------------------------------------------------------- geometry

fn random_camera(rng: &mut ParamRng) -> crate::Result<CameraModel> {
    let eye = Vector3::new(
        rng.random_range(-20.0..20.0),
        rng.random_range(-20.0..20.0),
        rng.random_range(1.0..30.0),
    );
    let target = Vector3::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        0.0,
    );
    let (w, h) = (rng.random_range(16..128), rng.random_range(16..128));
    CameraModel::look_at(
        eye,
        target,
        Vector3::z(),
        rng.random_range(20.0..200.0),
        rng.random_range(20.0..200.0),
        rng.random_range(0.0..w as f64),
        rng.random_range(0.0..h as f64),
        w,
        h,
    )
}

/// `K [R | t] [p; 1]` multiplied out by hand.
fn chain_projection(cam: &CameraModel, p: &Vector3<f64>) -> (f64, f64, f64) {
    let e = cam.extrinsics();
    let k = cam.intrinsics();
    let hom = [p.x, p.y, p.z, 1.0];
    let mut pc = [0.0; 3];
    for (r, slot) in pc.iter_mut().enumerate() {
        *slot = (0..4).map(|c| e[(r, c)] * hom[c]).sum();
    }
    let mut uvw = [0.0; 3];
    for (r, slot) in uvw.iter_mut().enumerate() {
        *slot = (0..3).map(|c| k[(r, c)] * pc[c]).sum();
    }
    (uvw[0] / uvw[2], uvw[1] / uvw[2], pc[2])
}

pub fn projection_oracle(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    let mut compared = 0;
    while compared < cases {
        let cam = random_camera(&mut rng)?;
        let p = Vector3::new(
            rng.random_range(-10.0..10.0),
            rng.random_range(-10.0..10.0),
            rng.random_range(0.0..3.0),
        );
        let got = project_point(&cam, &p);
        let (u, v, d) = chain_projection(&cam, &p);
        if d < 0.1 {
            if got.valid {
                return Err(Error::InvalidArgument(format!(
                    "point at depth {d} reported valid"
                )));
            }
            continue;
        }
        worst = worst
            .max((got.u - u).abs())
            .max((got.v - v).abs())
            .max((got.depth - d).abs());
        let inside =
            u >= 0.0 && u <= (cam.width() - 1) as f64 && v >= 0.0 && v <= (cam.height() - 1) as f64;
        if inside != got.valid {
            return Err(Error::InvalidArgument(format!(
                "validity mismatch at ({u}, {v})"
            )));
        }
        compared += 1;
    }
    Ok((worst, cases))
}

fn random_pose(rng: &mut ParamRng) -> EgoPose {
    EgoPose::new(
        rng.random_range(-10.0..10.0),
        rng.random_range(-10.0..10.0),
        rng.random_range(-3.2..3.2),
    )
}

fn mat_dev(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    (a - b).abs().max()
}

pub fn ego_motion_laws(cases: usize, seed: u64) -> crate::Result<(f64, usize)> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    let id = Matrix3::identity();
    for _ in 0..cases {
        let (a, b, c) = (
            random_pose(&mut rng),
            random_pose(&mut rng),
            random_pose(&mut rng),
        );
        if ego_motion_matrix(&a, &a) != id {
            return Err(Error::InvalidArgument(
                "equal poses do not give the identity".into(),
            ));
        }
        worst = worst.max(mat_dev(
            &(ego_motion_matrix(&a, &b) * ego_motion_matrix(&b, &a)),
            &id,
        ));
        worst = worst.max(mat_dev(
            &(ego_motion_matrix(&b, &c) * ego_motion_matrix(&a, &b)),
            &ego_motion_matrix(&a, &c),
        ));
    }
    Ok((worst, cases))
}

pub fn warp_identity_exact(seed: u64) -> crate::Result<bool> {
    let mut rng = seeded_rng(seed);
    for cs in [0.075, 0.5, 1.0, 0.3] {
        let spec = BevSpec::centered(rng.random_range(3..20), cs, vec![1.0])?;
        let f = random_bev(&spec, 3, &mut rng);
        if warp_bev(&f, &Matrix3::identity())? != f {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Warping a render by a one-cell ego translation reproduces the render at
/// the translated pose on every interior cell.
pub fn one_cell_translation_exact(seed: u64) -> crate::Result<usize> {
    let mut rng = seeded_rng(seed);
    let spec = BevSpec::centered(24, 0.5, vec![1.0])?;
    let mut mismatched = 0;
    for (dx, dy) in [(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)] {
        let boxes = (0..4)
            .map(|_| SceneBox {
                center: [
                    rng.random_range(-10..10) as f64 * 0.5,
                    rng.random_range(-10..10) as f64 * 0.5,
                    1.0,
                ],
                half_extent: [
                    0.5 * rng.random_range(1..4) as f64 * 0.5,
                    0.5 * rng.random_range(1..4) as f64 * 0.5,
                ],
                velocity: [0.0, 0.0],
                signature: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        let p0 = EgoPose::new(0.0, 0.0, 0.0);
        let p1 = EgoPose::new(dx * spec.cell_size, dy * spec.cell_size, 0.0);
        let scene = Scene::new(seed, spec.clone(), [1, 1], vec![], vec![p0, p1], boxes, 3)?;
        let warped = warp_bev(&render_lidar_bev(&scene, 0)?, &ego_motion_matrix(&p0, &p1))?;
        let truth = render_lidar_bev(&scene, 1)?;
        for i in 1..spec.cells_x - 1 {
            for j in 1..spec.cells_y - 1 {
                if warped.cell(i, j) != truth.cell(i, j) {
                    mismatched += 1;
                }
            }
        }
    }
    Ok(mismatched)
}

pub fn geometry_checks() -> Vec<Check> {
    const S: &str = "geometry";
    let mut out = vec![
        bounded(
            S,
            "project_point_vs_matrix_chain",
            projection_oracle(100, 31),
            PROJECTION_TOL,
        ),
        bounded(
            S,
            "ego_motion_identity_inverse_composition",
            ego_motion_laws(100, 32),
            EGO_LAW_TOL,
        ),
    ];
    out.push(match warp_identity_exact(33) {
        Ok(ok) => check(S, "warp_identity_bit_exact", ok, format!("bit-exact: {ok}")),
        Err(e) => check(S, "warp_identity_bit_exact", false, format!("error: {e}")),
    });
    out.push(match one_cell_translation_exact(34) {
        Ok(n) => check(
            S,
            "one_cell_translation_vs_render",
            n == 0,
            format!("{n} mismatched interior cells"),
        ),
        Err(e) => check(
            S,
            "one_cell_translation_vs_render",
            false,
            format!("error: {e}"),
        ),
    });
    out
}

// ------------------------------------------------------------- properties

fn softmax_property(seed: u64) -> crate::Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..10);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
        let shift = rng.random_range(-100.0..100.0);
        let s = softmax(&v)?;
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        worst = worst.max((s.iter().sum::<f64>() - 1.0).abs());
        worst = worst.max(max_diff(&s, &softmax(&shifted)?));
    }
    Ok(worst)
}

fn attention_weight_property(seed: u64) -> crate::Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let points = rng.random_range(1..6);
        let p = DeformAttnParams::random(heads * 2, heads, points, 1.0, &mut rng)?;
        let q: Vec<f64> = (0..heads * 2)
            .map(|_| rng.random_range(-5.0..5.0))
            .collect();
        let w = p.point_weights(&q)?;
        for head in w.chunks(points) {
            worst = worst.max((head.iter().sum::<f64>() - 1.0).abs());
            if head.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
                return Ok(f64::INFINITY);
            }
        }
    }
    Ok(worst)
}

fn grid_determinism(seed: u64) -> crate::Result<bool> {
    let mut rng = seeded_rng(seed);
    let p = DeformAttnParams::random(4, 2, 3, 1.0, &mut rng)?;
    let q = Tensor::random_uniform(&[9, 7, 4], 1.0, &mut rng);
    let refs = Tensor::from_fn(&[9, 7, 2], |_| rng.random_range(0.0..1.0));
    let map = Tensor::random_uniform(&[4, 10, 12], 1.0, &mut rng);
    Ok(deform_attn_grid(&q, &refs, &map, &p)? == deform_attn_grid_sequential(&q, &refs, &map, &p)?)
}

fn warp_adjoint_property(seed: u64) -> crate::Result<f64> {
    let mut rng = seeded_rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let spec = BevSpec::centered(rng.random_range(4..12), 0.5, vec![1.0])?;
        let a = random_bev(&spec, 2, &mut rng);
        let b = random_bev(&spec, 2, &mut rng);
        // small motion so the warped grid still overlaps the source
        let to = EgoPose::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-0.5..0.5),
        );
        let m = ego_motion_matrix(&EgoPose::new(0.0, 0.0, 0.0), &to);
        let lhs = dot(warp_bev(&a, &m)?.data().data(), b.data().data());
        let rhs = dot(a.data().data(), warp_bev_adjoint(&b, &m)?.data().data());
        worst = worst.max((lhs - rhs).abs() / lhs.abs().max(1.0));
    }
    Ok(worst)
}

fn single_frame_identity(seed: u64) -> crate::Result<bool> {
    let mut rng = seeded_rng(seed);
    let spec = BevSpec::centered(8, 0.5, vec![1.0])?;
    let f = random_bev(&spec, 4, &mut rng);
    let seq = FrameSequence::new(vec![f.clone()], vec![random_pose(&mut rng)])?;
    let p = TdaParams::init(4, 2, 2, &mut rng)?;
    Ok(temporal_fuse(&seq, &p)? == f)
}

fn lgvt_init_bounds(seed: u64) -> crate::Result<bool> {
    let spec = BevSpec::centered(16, 1.0, vec![0.5, 1.5])?;
    let rig = default_rig(&spec, 24, 24)?;
    let mut rng = seeded_rng(seed);
    let boxes = (0..5)
        .map(|_| SceneBox {
            center: [
                rng.random_range(-6.0..6.0),
                rng.random_range(-6.0..6.0),
                rng.random_range(0.5..1.5),
            ],
            half_extent: [0.5, 0.5],
            velocity: [0.0, 0.0],
            signature: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    let scene = Scene::new(
        seed,
        spec.clone(),
        [24, 24],
        rig,
        vec![EgoPose::new(0.0, 0.0, 0.0)],
        boxes,
        3,
    )?;
    let imgs = render_image_features(&scene, 0)?;
    let b = init_camera_bev(&spec, &imgs)?;
    for k in 0..3 {
        let lo = imgs
            .views()
            .iter()
            .flat_map(|v| v.channel(k))
            .cloned()
            .fold(f64::INFINITY, f64::min)
            .min(0.0);
        let hi = imgs
            .views()
            .iter()
            .flat_map(|v| v.channel(k))
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
            .max(0.0);
        if b.data()
            .data()
            .chunks(3)
            .any(|cell| cell[k] < lo - 1e-12 || cell[k] > hi + 1e-12)
        {
            return Ok(false);
        }
    }
    Ok(true)
}

fn render_determinism(seed: u64) -> crate::Result<bool> {
    let spec = default_spec(4);
    let rig = default_rig(&spec, 32, 32)?;
    let mk = || -> crate::Result<Scene> {
        let mut rng = seeded_rng(seed);
        let boxes = (0..3)
            .map(|_| SceneBox {
                center: [
                    rng.random_range(-8.0..8.0),
                    rng.random_range(-8.0..8.0),
                    1.0,
                ],
                half_extent: [0.6, 0.4],
                velocity: [rng.random_range(-1.0..1.0), 0.0],
                signature: (0..2).map(|_| rng.random_range(-1.0..1.0)).collect(),
            })
            .collect();
        Scene::new(
            seed,
            spec.clone(),
            [32, 32],
            rig.clone(),
            vec![EgoPose::new(0.0, 0.0, 0.0); 2],
            boxes,
            2,
        )
    };
    let (a, b) = (mk()?, mk()?);
    for t in 0..2 {
        if render_lidar_bev(&a, t)? != render_lidar_bev(&b, t)?
            || render_image_features(&a, t)?.views() != render_image_features(&b, t)?.views()
        {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn property_checks() -> Vec<Check> {
    const S: &str = "properties";
    let tol = |name, r: crate::Result<f64>, tol: f64| match r {
        Ok(e) => check(
            S,
            name,
            e <= tol,
            format!("max deviation {e:.3e} (tol {tol:.0e})"),
        ),
        Err(e) => check(S, name, false, format!("error: {e}")),
    };
    let flag = |name, r: crate::Result<bool>| match r {
        Ok(ok) => check(S, name, ok, format!("holds: {ok}")),
        Err(e) => check(S, name, false, format!("error: {e}")),
    };
    vec![
        tol(
            "softmax_normalized_shift_invariant",
            softmax_property(41),
            1e-12,
        ),
        tol(
            "attention_weights_per_head_sum_to_one",
            attention_weight_property(42),
            1e-12,
        ),
        flag("parallel_grid_matches_sequential", grid_determinism(43)),
        tol("warp_adjoint_dot_product", warp_adjoint_property(44), 1e-10),
        flag("single_frame_temporal_identity", single_frame_identity(45)),
        flag("camera_bev_within_view_range", lgvt_init_bounds(46)),
        flag("renders_deterministic", render_determinism(47)),
    ]
}
