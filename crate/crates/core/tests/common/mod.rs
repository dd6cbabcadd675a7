#![allow(dead_code)]

use aelab::denoisers::{posterior_mean_numeric, Denoiser};
use aelab::linalg::sample_haar_rows;
use aelab::models::{
    exact_linear_mse_masks, masked_mse_values, masks_for, mean_and_stderr, mse_monte_carlo, Autoencoder,
    LinearDecoderAE,
};
use aelab::theory::state_evolution_params;
use aelab::training::{analytic_gradient, random_encoder};
use aelab::{EncoderMatrix, Mask, Matrix, Prior, PriorFamily, Provenance, SeedSpec};
use rand::Rng;
use rand_distr::StandardNormal;

pub type Check = Result<String, String>;

fn gaussian(nr: usize, nc: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_fn(nr, nc, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

fn fd_gradient(a: &Matrix, b: &Matrix, p: f64, masks: &[Mask]) -> Matrix {
    let h = 1e-6;
    Matrix::from_fn(b.nrows(), b.ncols(), |i, j| {
        let mut bp = b.clone();
        bp[(i, j)] += h;
        let mut bm = b.clone();
        bm[(i, j)] -= h;
        (exact_linear_mse_masks(a, &bp, p, masks).unwrap() - exact_linear_mse_masks(a, &bm, p, masks).unwrap())
            / (2.0 * h)
    })
}

/// Analytic gradient vs central differences on 20 random instances.
pub fn gradient_oracle() -> Check {
    let root = SeedSpec::from_seed(2024);
    let mut worst: f64 = 0.0;
    for k in 0..20u64 {
        let s = root.child(k);
        let mut rng = s.named("dims").rng();
        let d = rng.random_range(4..=12);
        let n = rng.random_range(2..=d);
        let p = rng.random_range(0.2..=1.0);
        let b = gaussian(n, d, 1.0, &mut rng);
        let a = gaussian(d, n, 0.5, &mut rng);
        let masks = masks_for(d, p, 6, s.named("masks")).map_err(|e| e.to_string())?;
        let g = analytic_gradient(&a, &b, p, &masks).map_err(|e| e.to_string())?;
        let fd = fd_gradient(&a, &b, p, &masks);
        let rel = (&g - &fd).norm() / fd.norm();
        worst = worst.max(rel);
        if !(rel < 1e-4) {
            return Err(format!("instance {k} (n={n}, d={d}, p={p:.3}): relative error {rel:.3e}"));
        }
    }
    Ok(format!("20 gradients, worst relative error {worst:.2e}"))
}

/// Exact mask-averaged MSE vs sample Monte-Carlo on 10 random instances.
pub fn exact_vs_mc_oracle() -> Check {
    let root = SeedSpec::from_seed(77);
    let mut worst: f64 = 0.0;
    for k in 0..10u64 {
        let s = root.child(k);
        let mut rng = s.named("dims").rng();
        let d = rng.random_range(10..=40);
        let n = rng.random_range(3..=d);
        let p = rng.random_range(0.2..=1.0);
        let braw = if k % 2 == 0 {
            random_encoder(n, d, s.named("b"))
        } else {
            sample_haar_rows(n, d, s.named("b")).map_err(|e| e.to_string())?
        };
        let b = EncoderMatrix::new(braw, Provenance::Gaussian);
        let a = gaussian(d, n, 1.0 / (n as f64).sqrt(), &mut rng);
        let masks = masks_for(d, p, 2000, s.named("masks")).map_err(|e| e.to_string())?;
        let exact = mean_and_stderr(&masked_mse_values(&a, &b, p, &masks).map_err(|e| e.to_string())?);
        let model = Autoencoder::Linear(LinearDecoderAE { b, a });
        let prior = Prior::sparse_gaussian(p).map_err(|e| e.to_string())?;
        let mc = mse_monte_carlo(&model, &prior, 40000, s.named("mc")).map_err(|e| e.to_string())?;
        let z = (exact.estimate - mc.estimate).abs() / (exact.stderr.powi(2) + mc.stderr.powi(2)).sqrt();
        worst = worst.max(z);
        if !(z < 3.0) {
            return Err(format!(
                "instance {k} (n={n}, d={d}, p={p:.3}): exact {:.5} vs mc {:.5}, {z:.2} stderr",
                exact.estimate, mc.estimate
            ));
        }
    }
    Ok(format!("10 instances, worst gap {worst:.2} combined stderr"))
}

/// Closed-form denoisers vs the numeric posterior mean on [-10, 10].
pub fn denoiser_oracle() -> Check {
    let mut worst: f64 = 0.0;
    for fam in [PriorFamily::SparseGaussian, PriorFamily::SparseRademacher, PriorFamily::SparseLaplace] {
        for &p in &[0.1, 0.4, 0.8, 1.0] {
            for &r in &[0.25, 0.5, 1.0] {
                let prior = fam.at(p).map_err(|e| e.to_string())?;
                let se = state_evolution_params(r).map_err(|e| e.to_string())?;
                let f = Denoiser::new(prior.clone(), se);
                let mut sup: f64 = 0.0;
                for i in 0..=400 {
                    let y = -10.0 + 0.05 * i as f64;
                    sup = sup.max((f.eval(y) - posterior_mean_numeric(&prior, se, y).value).abs());
                }
                worst = worst.max(sup);
                if !(sup < 1e-6) {
                    return Err(format!("{} p={p} r={r}: sup-norm {sup:.2e}", fam.name()));
                }
            }
        }
    }
    Ok(format!("36 denoisers, worst sup-norm {worst:.2e}"))
}

/// Closed-form `E|x|` vs 10^7-sample Monte-Carlo.
pub fn mean_abs_oracle() -> Check {
    let n = 10_000_000;
    let mut buf = vec![0.0; n];
    let mut worst: f64 = 0.0;
    let families = [
        PriorFamily::SparseGaussian,
        PriorFamily::SparseRademacher,
        PriorFamily::SparseLaplace,
        PriorFamily::SparseGaussianMixture,
    ];
    for (i, fam) in families.into_iter().enumerate() {
        for (j, &p) in [0.3, 0.7].iter().enumerate() {
            let prior = fam.at(p).map_err(|e| e.to_string())?;
            let mut rng = SeedSpec::new(5, (2 * i + j) as u64).rng();
            prior.sample_into(&mut buf, &mut rng).map_err(|e| e.to_string())?;
            let mc = buf.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
            let gap = (mc - prior.mean_abs()).abs();
            worst = worst.max(gap);
            if !(gap < 1e-3) {
                return Err(format!("{} p={p}: closed {} vs mc {mc}", fam.name(), prior.mean_abs()));
            }
        }
    }
    Ok(format!("8 priors, worst gap {worst:.2e}"))
}
