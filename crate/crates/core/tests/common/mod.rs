//! Analytic gradients against central finite differences on random small
//! instances, shared by the unit-level tests and the acceptance run.
//! Parameters live in f32, so each difference quotient divides by the step
//! that was actually applied after rounding.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slicevol::decoder::{Mlp, MlpConfig};
use slicevol::encoding::EncodingConfig;
use slicevol::field::{init_field, Combiner, Field, FieldKind, FieldShape};
use slicevol::geometry::Vec3;
use slicevol::loss::{SsimConfig, SsimWorkspace};

pub const CASES: usize = 200;
pub const REL: f64 = 1e-3;

pub fn close(analytic: f64, numeric: f64) -> bool {
    let scale = analytic.abs().max(numeric.abs());
    (analytic - numeric).abs() <= REL * scale + 1e-9
}

pub fn assert_close(analytic: f64, numeric: f64, what: &str) {
    assert!(
        close(analytic, numeric),
        "{what}: analytic {analytic} vs numeric {numeric}"
    );
}

/// Coordinate that keeps at least `margin` lattice cells away from any
/// grid line on every axis, so a small step never crosses a kink.
pub fn interior_coord(rng: &mut ChaCha8Rng, res: [usize; 3], margin: f64) -> Vec3 {
    let mut c = [0.0; 3];
    for a in 0..3 {
        let cell = rng.gen_range(0..res[a] - 1) as f64;
        let t = rng.gen_range(margin..1.0 - margin);
        c[a] = -1.0 + 2.0 * (cell + t) / (res[a] - 1) as f64;
    }
    c
}

pub fn random_shape(rng: &mut ChaCha8Rng, kind: FieldKind, combiner: Combiner) -> FieldShape {
    FieldShape {
        kind,
        combiner,
        resolution: [rng.gen_range(2..7), rng.gen_range(2..7), rng.gen_range(2..7)],
        rank: rng.gen_range(1..4),
        channels: rng.gen_range(1..4),
    }
}

pub fn field_objective(field: &Field, coord: Vec3, upstream: &[f64]) -> f64 {
    field
        .sample(coord)
        .unwrap()
        .iter()
        .zip(upstream)
        .map(|(a, b)| a * b)
        .sum()
}

pub fn perturb_f32(v: &mut f32, h: f64, sign: f64) -> f64 {
    let old = *v;
    *v = (old as f64 + sign * h) as f32;
    *v as f64
}

pub fn field_suite() {
    let variants = [
        (FieldKind::TriPlanar, Combiner::Product),
        (FieldKind::TriPlanar, Combiner::Sum),
        (FieldKind::Cp, Combiner::Product),
        (FieldKind::Cp, Combiner::Sum),
    ];
    for (v, &(kind, combiner)) in variants.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + v as u64);
        for case in 0..CASES {
            let shape = random_shape(&mut rng, kind, combiner);
            let mut field = init_field(shape, case as u64).unwrap();
            for f in field.factors_mut() {
                for x in f.iter_mut() {
                    *x = rng.gen_range(-1.5f32..1.5);
                }
            }
            let coord = interior_coord(&mut rng, shape.resolution, 0.05);
            let upstream: Vec<f64> = (0..shape.channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut grads = field.zero_gradients();
            let mut scratch = field.scratch();
            let cg = field.backward_sample(coord, &upstream, &mut grads, &mut scratch);

            for a in 0..3 {
                let h = 1e-6;
                let mut plus = coord;
                plus[a] += h;
                let mut minus = coord;
                minus[a] -= h;
                let fd =
                    (field_objective(&field, plus, &upstream) - field_objective(&field, minus, &upstream)) / (2.0 * h);
                assert_close(cg[a], fd, &format!("{kind:?}/{combiner:?} coord axis {a}, case {case}"));
            }

            for _ in 0..4 {
                let p = rng.gen_range(0..3);
                let i = rng.gen_range(0..field.factors()[p].len());
                let orig = field.factors()[p][i];
                let hi = perturb_f32(&mut field.factors_mut()[p][i], 1e-2, 1.0);
                let fp = field_objective(&field, coord, &upstream);
                field.factors_mut()[p][i] = orig;
                let lo = perturb_f32(&mut field.factors_mut()[p][i], 1e-2, -1.0);
                let fm = field_objective(&field, coord, &upstream);
                field.factors_mut()[p][i] = orig;
                let fd = (fp - fm) / (hi - lo);
                assert_close(
                    grads.factors[p][i],
                    fd,
                    &format!("{kind:?}/{combiner:?} factor {p}[{i}], case {case}"),
                );
            }
        }
    }
}

pub fn encoding_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..CASES {
        let degree = rng.gen_range(0..11);
        let cfg = EncodingConfig {
            degree,
            include_raw: degree == 0 || case % 2 == 0,
        };
        let c = rng.gen_range(1..5);
        let feats: Vec<f64> = (0..c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let up: Vec<f64> = (0..cfg.output_len(c)).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad = cfg.encode_backward(&feats, &up).unwrap();
        let obj = |f: &[f64]| -> f64 { cfg.encode(f).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum() };
        for k in 0..c {
            let h = 1e-7;
            let mut p = feats.clone();
            p[k] += h;
            let mut m = feats.clone();
            m[k] -= h;
            let fd = (obj(&p) - obj(&m)) / (2.0 * h);
            assert_close(grad[k], fd, &format!("encoding {cfg:?} scalar {k}, case {case}"));
        }
    }
}

/// Zero pattern of the hidden activations, used to skip steps that cross
/// a ReLU kink.
pub fn activation_pattern(mlp: &Mlp, input: &[f64]) -> Vec<bool> {
    let mut cache = vec![0.0; mlp.cache_len()];
    mlp.forward_cached(input, &mut cache);
    cache.iter().map(|v| *v > 0.0).collect()
}

pub fn param_mut(mlp: &mut Mlp, layer: usize, bias: bool, i: usize) -> &mut f32 {
    let l = &mut mlp.layers_mut()[layer];
    if bias {
        &mut l.bias[i]
    } else {
        &mut l.weights[i]
    }
}

pub fn decoder_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    let mut case = 0;
    while checked < CASES {
        case += 1;
        let layers = [2, 3, 4][case % 3];
        let width = [32, 64, 128][(case / 3) % 3];
        let inputs = rng.gen_range(1..60);
        let mut mlp = Mlp::init(MlpConfig::new(layers, width, inputs), case as u64).unwrap();
        for l in mlp.layers_mut() {
            for b in l.bias.iter_mut() {
                *b = rng.gen_range(-0.1f32..0.1);
            }
        }
        let x: Vec<f64> = (0..inputs).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let upstream = rng.gen_range(0.5..2.0);
        let mut grads = mlp.zero_gradients();
        let dx = mlp.backward(&x, upstream, &mut grads).unwrap();
        let base = activation_pattern(&mlp, &x);

        let mut ok = true;
        for _ in 0..3 {
            let k = rng.gen_range(0..inputs);
            let h = 1e-6;
            let mut p = x.clone();
            p[k] += h;
            let mut m = x.clone();
            m[k] -= h;
            if activation_pattern(&mlp, &p) != base || activation_pattern(&mlp, &m) != base {
                ok = false;
                continue;
            }
            let fd = upstream * (mlp.forward(&p).unwrap() - mlp.forward(&m).unwrap()) / (2.0 * h);
            assert_close(dx[k], fd, &format!("decoder {layers}-{width} input {k}, case {case}"));
        }
        for _ in 0..4 {
            let l = rng.gen_range(0..layers);
            let is_bias = rng.gen_bool(0.3);
            let len = if is_bias {
                mlp.layers()[l].bias.len()
            } else {
                mlp.layers()[l].weights.len()
            };
            let i = rng.gen_range(0..len);
            let orig = *param_mut(&mut mlp, l, is_bias, i);
            let hi = perturb_f32(param_mut(&mut mlp, l, is_bias, i), 1e-4, 1.0);
            let pattern_p = activation_pattern(&mlp, &x);
            let fp = mlp.forward(&x).unwrap();
            *param_mut(&mut mlp, l, is_bias, i) = orig;
            let lo = perturb_f32(param_mut(&mut mlp, l, is_bias, i), 1e-4, -1.0);
            let pattern_m = activation_pattern(&mlp, &x);
            let fm = mlp.forward(&x).unwrap();
            *param_mut(&mut mlp, l, is_bias, i) = orig;
            if pattern_p != base || pattern_m != base {
                ok = false;
                continue;
            }
            let fd = upstream * (fp - fm) / (hi - lo);
            let analytic = if is_bias { grads.bias[l][i] } else { grads.weights[l][i] };
            assert_close(
                analytic,
                fd,
                &format!("decoder {layers}-{width} layer {l} param {i}, case {case}"),
            );
        }
        if ok {
            checked += 1;
        }
    }
}

pub fn ssim_suite() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..CASES {
        let rows = rng.gen_range(11..18);
        let cols = rng.gen_range(11..18);
        let n = rows * cols;
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = if case % 4 == 0 {
            a.iter()
                .map(|v| (v + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0))
                .collect()
        } else {
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
        };
        let mut ws = SsimWorkspace::new(SsimConfig::default(), rows, cols).unwrap();
        let mut grad = vec![0.0; n];
        let upstream = -1.0;
        ws.value_and_grad(&a, &b, upstream, &mut grad).unwrap();
        for _ in 0..3 {
            let k = rng.gen_range(0..n);
            let h = 1e-6;
            let mut p = a.clone();
            p[k] += h;
            let mut m = a.clone();
            m[k] -= h;
            let fd = upstream * (ws.value(&p, &b).unwrap() - ws.value(&m, &b).unwrap()) / (2.0 * h);
            assert_close(grad[k], fd, &format!("ssim {rows}x{cols} pixel {k}, case {case}"));
        }
    }
}
