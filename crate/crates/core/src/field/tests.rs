use super::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn grid2(n: usize) -> GridSpec {
    GridSpec::new(&[n, n]).unwrap()
}

/// Smooth random field from a handful of seeded sinusoids.
fn smooth_scalar(grid: &GridSpec, seed: u64, amplitude: f64) -> ScalarField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = grid.ndim();
    let waves: Vec<(Vec<f64>, f64, f64)> = (0..4)
        .map(|_| {
            let k: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            (k, rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.3..1.0))
        })
        .collect();
    ScalarField::from_fn(grid, |idx| {
        let mut v = 0.0;
        for (k, phase, a) in &waves {
            let mut arg = *phase;
            for (ax, &i) in idx.iter().enumerate() {
                arg += std::f64::consts::TAU * k[ax] * i as f64 / grid.dims[ax] as f64;
            }
            v += a * arg.sin();
        }
        amplitude * v
    })
}

fn smooth_displacement(grid: &GridSpec, seed: u64, amplitude: f64) -> Vec<Vec<f64>> {
    (0..grid.ndim())
        .map(|a| smooth_scalar(grid, seed.wrapping_add(a as u64 * 97), amplitude).data)
        .collect()
}

#[test]
fn grid_validation() {
    assert!(GridSpec::new(&[3, 8]).is_err());
    assert!(GridSpec::new(&[8]).is_err());
    assert!(GridSpec::new(&[8, 8, 8, 8]).is_err());
    assert!(GridSpec::with_spacing(&[8, 8], &[1.0, 0.0]).is_err());
    assert!(GridSpec::new(&[4, 4]).is_ok());
}

#[test]
fn strides_row_major() {
    let g = GridSpec::new(&[4, 5, 6]).unwrap();
    assert_eq!(&g.strides()[..3], &[30, 6, 1]);
    assert_eq!(g.flat(&[1, 2, 3]), 45);
    assert_eq!(&g.unflat(45)[..3], &[1, 2, 3]);
}

#[test]
fn interpolate_constant_field() {
    let f = ScalarField::constant(&grid2(8), 3.0);
    for p in [[0.0, 0.0], [2.5, 3.7], [-4.0, 100.0]] {
        assert_eq!(interpolate(&f, &p), 3.0);
    }
}

#[test]
fn interpolate_linear_midpoint() {
    // f[.., 0] = 0, f[.., 1] = 2 along axis 1: midpoint is 1.
    let g = grid2(4);
    let f = ScalarField::from_fn(&g, |idx| 2.0 * idx[1] as f64);
    assert!((interpolate(&f, &[0.0, 0.5]) - 1.0).abs() < 1e-15);
}

#[test]
fn interpolate_clamps_out_of_bounds() {
    let g = grid2(6);
    let f = smooth_scalar(&g, 7, 1.0);
    assert_eq!(interpolate(&f, &[-1.0, -1.0]), f.data[0]);
    let far = interpolate(&f, &[100.0, 100.0]);
    assert_eq!(far, f.data[g.flat(&[5, 5])]);
}

#[test]
fn interpolate_reproduces_grid_values() {
    let g = grid2(9);
    let f = smooth_scalar(&g, 3, 2.0);
    for flat in 0..g.len() {
        let idx = g.unflat(flat);
        let p = [idx[0] as f64, idx[1] as f64];
        assert!((interpolate(&f, &p) - f.data[flat]).abs() < 1e-12);
    }
}

#[test]
fn interpolate_grad_matches_finite_differences() {
    let g = grid2(10);
    let f = smooth_scalar(&g, 11, 1.5);
    let eps = 1e-6;
    for p in [[2.3, 4.7], [5.5, 1.2], [8.1, 8.6]] {
        let (_, grad) = interpolate_slice_with_grad(&f.data, &g, &p);
        for a in 0..2 {
            let mut hi = p;
            let mut lo = p;
            hi[a] += eps;
            lo[a] -= eps;
            let fd = (interpolate(&f, &hi) - interpolate(&f, &lo)) / (2.0 * eps);
            assert!((grad[a] - fd).abs() < 1e-6, "axis {a} at {p:?}: {} vs {fd}", grad[a]);
        }
    }
}

#[test]
fn scatter_is_adjoint_of_interpolation() {
    let g = grid2(8);
    let f = smooth_scalar(&g, 21, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    // <scatter(w at p), f> must equal w * interp(f, p).
    for _ in 0..10 {
        let p = [rng.gen_range(-1.0..8.0), rng.gen_range(-1.0..8.0)];
        let w: f64 = rng.gen_range(-2.0..2.0);
        let mut adj = vec![0.0; g.len()];
        scatter_interpolation(&mut adj, &g, &p, w);
        let dot: f64 = adj.iter().zip(&f.data).map(|(a, b)| a * b).sum();
        assert!((dot - w * interpolate(&f, &p)).abs() < 1e-12);
    }
}

#[test]
fn warp_identity_is_bitwise() {
    let g = grid2(12);
    let f = smooth_scalar(&g, 5, 1.0);
    let id = DeformationMap::identity(&g);
    let w = warp(&f, &id).unwrap();
    for (a, b) in w.data.iter().zip(&f.data) {
        assert!((a - b).abs() < 1e-13);
    }
}

#[test]
fn warp_uniform_shift_clamps_boundary() {
    let g = grid2(6);
    let f = ScalarField::from_fn(&g, |idx| idx[0] as f64);
    // phi_inv(x) = x + e0: output(x) = f(x0 + 1, x1), clamped at the top row.
    let mut phi = DeformationMap::identity(&g);
    for v in &mut phi.positions[0] {
        *v += 1.0;
    }
    let w = warp(&f, &phi).unwrap();
    for flat in 0..g.len() {
        let idx = g.unflat(flat);
        let expect = (idx[0] + 1).min(5) as f64;
        assert!((w.data[flat] - expect).abs() < 1e-13);
    }
}

#[test]
fn warp_grid_mismatch_is_error() {
    let f = ScalarField::zeros(&grid2(6));
    let id = DeformationMap::identity(&grid2(8));
    assert!(warp(&f, &id).is_err());
}

#[test]
fn warp_round_trip_through_numeric_inverse() {
    let g = grid2(24);
    let f = smooth_scalar(&g, 13, 1.0);
    let u = smooth_displacement(&g, 17, 0.4);

    let mut phi_inv = DeformationMap::identity(&g);
    for a in 0..2 {
        for (p, du) in phi_inv.positions[a].iter_mut().zip(&u[a]) {
            *p += du;
        }
    }
    // Numeric inverse by fixed point: w(x) = -u(x + w(x)).
    let mut phi = DeformationMap::identity(&g);
    for flat in 0..g.len() {
        let idx = g.unflat(flat);
        let x = [idx[0] as f64, idx[1] as f64];
        let mut w = [0.0f64; 2];
        for _ in 0..40 {
            let q = [x[0] + w[0], x[1] + w[1]];
            for a in 0..2 {
                w[a] = -interpolate_slice(&u[a], &g, &q);
            }
        }
        for a in 0..2 {
            phi.positions[a][flat] = x[a] + w[a];
        }
    }

    let once = warp(&f, &phi_inv).unwrap();
    let back = warp(&once, &phi).unwrap();
    let (lo, hi) = f.min_max();
    let range = hi - lo;
    let mut l1 = 0.0;
    let mut count = 0usize;
    for flat in 0..g.len() {
        let idx = g.unflat(flat);
        if idx[..2].iter().zip(&g.dims).any(|(&i, &n)| i < 3 || i >= n - 3) {
            continue;
        }
        l1 += (back.data[flat] - f.data[flat]).abs();
        count += 1;
    }
    assert!(l1 / count as f64 / range < 1e-2, "interior L1 {}", l1 / count as f64 / range);
}

#[test]
fn gradient_of_constant_is_zero() {
    let f = ScalarField::constant(&grid2(8), 4.2);
    let grad = central_gradient(&f);
    assert_eq!(grad.max_abs(), 0.0);
}

#[test]
fn gradient_of_ramp() {
    let g = grid2(8);
    let f = ScalarField::from_fn(&g, |idx| idx[0] as f64);
    let grad = central_gradient(&f);
    for flat in 0..g.len() {
        assert!((grad.comps[0][flat] - 1.0).abs() < 1e-14);
        assert!(grad.comps[1][flat].abs() < 1e-14);
    }
}

#[test]
fn gradient_of_sine_matches_analytic_derivative() {
    let n = 32usize;
    let g = grid2(n);
    let k = std::f64::consts::TAU / n as f64;
    let f = ScalarField::from_fn(&g, |idx| (k * idx[0] as f64).sin());
    let grad = central_gradient(&f);
    let tol = 0.5 * k.powi(3);
    for flat in 0..g.len() {
        let idx = g.unflat(flat);
        if idx[0] == 0 || idx[0] == n - 1 {
            continue;
        }
        let expect = k * (k * idx[0] as f64).cos();
        assert!(
            (grad.comps[0][flat] - expect).abs() < tol,
            "at {idx:?}: {} vs {expect}",
            grad.comps[0][flat]
        );
    }
}

#[test]
fn gradient_is_linear() {
    let g = grid2(10);
    let f = smooth_scalar(&g, 31, 1.0);
    let h = smooth_scalar(&g, 32, 2.0);
    let (alpha, beta) = (1.7, -0.6);
    let combo = ScalarField::new(
        g.clone(),
        f.data.iter().zip(&h.data).map(|(a, b)| alpha * a + beta * b).collect(),
    )
    .unwrap();
    let gf = central_gradient(&f);
    let gh = central_gradient(&h);
    let gc = central_gradient(&combo);
    for a in 0..2 {
        for flat in 0..g.len() {
            let expect = alpha * gf.comps[a][flat] + beta * gh.comps[a][flat];
            assert!((gc.comps[a][flat] - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn axis_derivative_transpose_is_exact_adjoint() {
    let g = GridSpec::with_spacing(&[7, 9], &[0.5, 1.25]).unwrap();
    let f = smooth_scalar(&g, 41, 1.0);
    let u = smooth_scalar(&g, 42, 1.0);
    for axis in 0..2 {
        let df = axis_derivative(&f.data, &g, axis);
        let dtu = axis_derivative_transpose(&u.data, &g, axis);
        let lhs: f64 = df.iter().zip(&u.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = f.data.iter().zip(&dtu).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "axis {axis}: {lhs} vs {rhs}");
    }
}

#[test]
fn jacobian_of_identity_is_one() {
    for g in [grid2(8), GridSpec::new(&[5, 6, 7]).unwrap()] {
        let jd = jacobian_determinant(&DeformationMap::identity(&g));
        for &v in &jd.data {
            assert!((v - 1.0).abs() < 1e-13);
        }
    }
}

#[test]
fn jacobian_of_uniform_scaling() {
    let g = grid2(10);
    let s = 0.9;
    let mut phi = DeformationMap::identity(&g);
    for a in 0..2 {
        for v in &mut phi.positions[a] {
            *v *= s;
        }
    }
    let jd = jacobian_determinant(&phi);
    for flat in 0..g.len() {
        let idx = g.unflat(flat);
        if idx[..2].iter().zip(&g.dims).any(|(&i, &n)| i == 0 || i == n - 1) {
            continue;
        }
        assert!((jd.data[flat] - s * s).abs() < 1e-12);
    }
}

#[test]
fn jacobian_matches_direct_determinant_oracle() {
    let g = grid2(12);
    let u = smooth_displacement(&g, 51, 0.3);
    let mut phi = DeformationMap::identity(&g);
    for a in 0..2 {
        for (p, du) in phi.positions[a].iter_mut().zip(&u[a]) {
            *p += du;
        }
    }
    let jd = jacobian_determinant(&phi);

    // Independent oracle: explicit index arithmetic and 2x2 determinant.
    let n = g.dims[0];
    let at = |comp: usize, i: usize, j: usize| phi.positions[comp][i * n + j];
    let diff = |comp: usize, i: usize, j: usize, axis: usize| -> f64 {
        let (pos, dim) = if axis == 0 { (i, n) } else { (j, n) };
        if pos == 0 {
            if axis == 0 { at(comp, 1, j) - at(comp, 0, j) } else { at(comp, i, 1) - at(comp, i, 0) }
        } else if pos == dim - 1 {
            if axis == 0 {
                at(comp, dim - 1, j) - at(comp, dim - 2, j)
            } else {
                at(comp, i, dim - 1) - at(comp, i, dim - 2)
            }
        } else if axis == 0 {
            0.5 * (at(comp, i + 1, j) - at(comp, i - 1, j))
        } else {
            0.5 * (at(comp, i, j + 1) - at(comp, i, j - 1))
        }
    };
    for i in 0..n {
        for j in 0..n {
            let det = diff(0, i, j, 0) * diff(1, i, j, 1) - diff(0, i, j, 1) * diff(1, i, j, 0);
            assert!((jd.data[i * n + j] - det).abs() < 1e-12);
        }
    }
}

#[test]
fn gff_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let g = GridSpec::with_spacing(&[6, 8], &[1.0, 1.5]).unwrap();

    let f = smooth_scalar(&g, 61, 1.0);
    let p = dir.path().join("img.gff");
    gff::write_scalar(&p, &f).unwrap();
    let f2 = gff::read_scalar(&p).unwrap();
    assert_eq!(f2.grid.dims, g.dims);
    for (a, b) in f.data.iter().zip(&f2.data) {
        assert!((a - b).abs() < 1e-6); // f32 on disk
    }

    let v = VectorField::new(g.clone(), smooth_displacement(&g, 62, 1.0)).unwrap();
    let pv = dir.path().join("mom.gff");
    gff::write_vector(&pv, &v).unwrap();
    let v2 = gff::read_vector(&pv).unwrap();
    assert_eq!(v2.comps.len(), 2);

    let m = Mask::from_fn(&g, |idx| idx[0] % 2 == 0);
    let pm = dir.path().join("mask.gff");
    gff::write_mask(&pm, &m).unwrap();
    assert_eq!(gff::read_mask(&pm).unwrap().flags, m.flags);

    let meta = gff::FieldMeta { subject: Some("s01".into()), time: Some(6.0), units: Some("months".into()) };
    gff::write_meta(&p, &meta).unwrap();
    assert_eq!(gff::read_meta(&p).unwrap(), meta);

    // Scalar reader must refuse multi-component files.
    assert!(gff::read_scalar(&pv).is_err());
}

#[test]
fn map_composition_with_identity() {
    let g = grid2(10);
    let u = smooth_displacement(&g, 71, 0.5);
    let mut phi = DeformationMap::identity(&g);
    for a in 0..2 {
        for (p, du) in phi.positions[a].iter_mut().zip(&u[a]) {
            *p += du;
        }
    }
    let id = DeformationMap::identity(&g);
    let left = id.compose(&phi).unwrap();
    let right = phi.compose(&id).unwrap();
    for a in 0..2 {
        for flat in 0..g.len() {
            // right-composition samples at exact grid points, so it is exact
            // everywhere; left-composition clamps where phi leaves the grid.
            assert!((right.positions[a][flat] - phi.positions[a][flat]).abs() < 1e-12);
            let in_bounds = (0..2)
                .all(|b| phi.positions[b][flat] >= 0.0 && phi.positions[b][flat] <= (g.dims[b] - 1) as f64);
            if in_bounds {
                assert!((left.positions[a][flat] - phi.positions[a][flat]).abs() < 1e-12);
            }
        }
    }
}
