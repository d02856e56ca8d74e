//! Mixture-based noise filtering on planted per-sample losses from two views.

use ncl::nfb::{build_sets, em_fit, normalize_losses, soft_labels, EmOptions};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> ncl::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let clean = Normal::<f64>::new(0.4, 0.15).unwrap();
    let noisy = Normal::<f64>::new(4.0, 0.8).unwrap();
    // First 12 samples clean, last 4 mismatched.
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..16)
            .map(|i| {
                if i < 12 {
                    clean.sample(rng)
                } else {
                    noisy.sample(rng)
                }
                .max(0.0)
            })
            .collect()
    };
    let global = draw(&mut rng);
    let compensated = draw(&mut rng);

    let opts = EmOptions::default();
    let fit = em_fit(&normalize_losses(&global), &opts)?;
    let fit_wcb = em_fit(&normalize_losses(&compensated), &opts)?;
    let p = fit.params;
    println!(
        "global view: means {:.3}/{:.3}, weights {:.2}/{:.2}, {} iterations",
        p.means[0], p.means[1], p.weights[0], p.weights[1], fit.iterations
    );
    let ll = &fit.log_likelihoods;
    println!(
        "log-likelihood {:.3} -> {:.3} (non-decreasing: {})",
        ll[0],
        ll[ll.len() - 1],
        ll.windows(2).all(|w| w[1] >= w[0] - 1e-10)
    );

    let post = fit.posteriors(&normalize_losses(&global));
    let post_wcb = fit_wcb.posteriors(&normalize_losses(&compensated));
    let sets = build_sets(&post, &post_wcb, 0.5)?;
    println!(
        "|S_m| = {}, |S_u| = {}, |S_p| = {}",
        sets.s_m.len(),
        sets.s_u.len(),
        sets.s_p.len()
    );
    let labels = soft_labels(&sets);
    let bits: String = labels
        .0
        .iter()
        .map(|&l| if l { '1' } else { '0' })
        .collect();
    println!("soft labels: {bits}");
    Ok(())
}
