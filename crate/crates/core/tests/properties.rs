use proptest::prelude::*;

use slicevol::decoder::{Mlp, MlpConfig};
use slicevol::encoding::EncodingConfig;
use slicevol::field::{init_field, Combiner, FieldKind, FieldShape};
use slicevol::geometry::{mat_vec, pose_to_grid, rotation_zyx, Pose, Vec3};
use slicevol::loss::{SsimConfig, SsimWorkspace};
use slicevol::volume::{
    generate_phantom, load_image_raw, load_volume, save_image_raw, save_volume, DenseVolume, Image2D, PhantomSpec,
};

fn kind() -> impl Strategy<Value = FieldKind> {
    prop_oneof![Just(FieldKind::TriPlanar), Just(FieldKind::Cp)]
}

fn combiner() -> impl Strategy<Value = Combiner> {
    prop_oneof![Just(Combiner::Product), Just(Combiner::Sum)]
}

fn shape() -> impl Strategy<Value = FieldShape> {
    (
        kind(),
        combiner(),
        [2usize..7, 2usize..7, 2usize..7],
        1usize..4,
        1usize..4,
    )
        .prop_map(|(kind, combiner, resolution, rank, channels)| FieldShape {
            kind,
            combiner,
            resolution,
            rank,
            channels,
        })
}

fn pose() -> impl Strategy<Value = Pose> {
    (
        [-180.0f64..180.0, -90.0f64..90.0, -180.0f64..180.0],
        [-0.5f64..0.5, -0.5f64..0.5, -0.5f64..0.5],
    )
        .prop_map(|(e, t)| Pose::new(e, t))
}

fn lattice(i: usize, n: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (n - 1) as f64
}

fn dist(a: Vec3, b: Vec3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lattice_samples_equal_dense_reconstruction(shape in shape(), seed in any::<u64>()) {
        let field = init_field(shape, seed).unwrap();
        let dense = field.reconstruct_dense().unwrap();
        let [ni, nj, nk] = shape.resolution;
        for i in 0..ni {
            for j in 0..nj {
                for k in 0..nk {
                    let f = field.sample([lattice(i, ni), lattice(j, nj), lattice(k, nk)]).unwrap();
                    for (c, v) in f.iter().enumerate() {
                        prop_assert!((v - dense.get(i, j, k, c)).abs() <= 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn sampling_is_continuous(shape in shape(), seed in any::<u64>(), p in [-0.99f64..0.99, -0.99f64..0.99, -0.99f64..0.99]) {
        let field = init_field(shape, seed).unwrap();
        let a = field.sample(p).unwrap();
        let b = field.sample([p[0] + 1e-9, p[1] - 1e-9, p[2] + 1e-9]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn param_count_law(shape in shape()) {
        let [i, j, k] = shape.resolution;
        let per = match shape.kind {
            FieldKind::TriPlanar => i * j + j * k + i * k,
            FieldKind::Cp => i + j + k,
        };
        let field = init_field(shape, 0).unwrap();
        prop_assert_eq!(field.param_count(), shape.channels * shape.rank * per);
    }

    #[test]
    fn encoding_width(degree in 0usize..8, raw in any::<bool>(), values in prop::collection::vec(-1.0f64..1.0, 1..12)) {
        prop_assume!(degree > 0 || raw);
        let enc = EncodingConfig::new(degree, raw).unwrap();
        let out = enc.encode(&values).unwrap();
        prop_assert_eq!(out.len(), values.len() * (2 * degree + usize::from(raw)));
        prop_assert_eq!(out.len(), enc.output_len(values.len()));
    }

    #[test]
    fn decoder_output_in_unit_interval(layers in 2usize..5, width in 1usize..40, seed in any::<u64>(),
                                        input in prop::collection::vec(-2.0f64..2.0, 6)) {
        let mlp = Mlp::init(MlpConfig::new(layers, width, 6), seed).unwrap();
        let y = mlp.forward(&input).unwrap();
        prop_assert!(y > 0.0 && y < 1.0);
    }

    #[test]
    fn ssim_symmetric_and_reflexive(a in prop::collection::vec(0.0f64..1.0, 144), b in prop::collection::vec(0.0f64..1.0, 144)) {
        let mut ws = SsimWorkspace::new(SsimConfig::default(), 12, 12).unwrap();
        let ab = ws.value(&a, &b).unwrap();
        let ba = ws.value(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() <= 1e-9);
        prop_assert!((ws.value(&a, &a).unwrap() - 1.0).abs() <= 1e-9);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn rotation_is_an_isometry(p in pose(), rows in 2usize..9, cols in 2usize..9) {
        let g = pose_to_grid(&p, rows, cols, 1.0).unwrap();
        let base = pose_to_grid(&Pose::new([0.0; 3], [0.0; 3]), rows, cols, 1.0).unwrap();
        for a in 0..g.len() {
            for b in (a + 1)..g.len() {
                let d0 = dist(base.coords[a], base.coords[b]);
                prop_assert!((dist(g.coords[a], g.coords[b]) - d0).abs() <= 1e-5);
            }
        }
    }

    #[test]
    fn inverse_pose_recovers_base_lattice(p in pose(), rows in 2usize..9, cols in 2usize..9) {
        let g = pose_to_grid(&p, rows, cols, 1.0).unwrap();
        let rot = rotation_zyx(p.euler);
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = rot[j][i];
            }
        }
        for r in 0..rows {
            for c in 0..cols {
                let x = g.coords[r * cols + c];
                let back = mat_vec(&rt, [x[0] - p.trans[0], x[1] - p.trans[1], x[2] - p.trans[2]]);
                let b = g.base_point(r, c);
                prop_assert!(dist(back, b) <= 1e-5);
            }
        }
    }

    #[test]
    fn grids_are_coplanar(p in pose(), rows in 2usize..9, cols in 2usize..9) {
        let g = pose_to_grid(&p, rows, cols, 1.0).unwrap();
        let n = p.normal();
        let d0 = slicevol::geometry::dot(n, g.coords[0]);
        for x in &g.coords {
            prop_assert!((slicevol::geometry::dot(n, *x) - d0).abs() <= 1e-9);
        }
    }

    #[test]
    fn volume_round_trip_is_bitwise(dims in [2usize..6, 2usize..6, 2usize..6], seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = dims[0] * dims[1] * dims[2];
        let voxels: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
        let vol = DenseVolume::new(dims, 0.5, voxels).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.raw");
        save_volume(&vol, &path).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.dims(), vol.dims());
        let same = back.voxels().iter().zip(vol.voxels()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);

        let img = Image2D::new(dims[0], dims[1], vol.voxels()[..dims[0] * dims[1]].to_vec()).unwrap();
        let ipath = dir.path().join("i.raw");
        save_image_raw(&img, &ipath).unwrap();
        prop_assert_eq!(load_image_raw(&ipath).unwrap(), img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn phantom_is_pure_and_in_range(seed in any::<u64>(), n in 8usize..14) {
        let spec = PhantomSpec::new([n, n + 1, n + 2], seed);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        prop_assert_eq!(a.voxels(), b.voxels());
        prop_assert!(a.voxels().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn identity_pose_gives_canonical_axial_lattice() {
    let g = pose_to_grid(&Pose::new([0.0; 3], [0.0; 3]), 5, 7, 1.0).unwrap();
    for r in 0..5 {
        for c in 0..7 {
            assert_eq!(g.coords[r * 7 + c], [lattice(c, 7), lattice(r, 5), 0.0]);
        }
    }
}
