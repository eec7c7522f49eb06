//! Double-precision finite differences against the backward pass on the full
//! model, one run per framework objective.
//!
//! ```bash
//! cargo run --example gradient_check
//! ```

use dialab::layout::ALL_FRAMEWORKS;
use dialab::models::init_model_for;
use dialab::numcore::finite_difference_check;
use dialab::objectives::{batch_loss, build_example, ObjectiveConfig};
use dialab::transformer::ModelConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        vocab_size: 20,
        max_positions: 128,
        type_count: 2,
        tie_output_embedding: true,
    };
    let ocfg = ObjectiveConfig {
        mask_rate: 0.4,
        interval: 2,
    };
    println!("L={} d_h={} vocab={} (double precision)\n", cfg.layers, cfg.hidden, cfg.vocab_size);
    for fw in ALL_FRAMEWORKS {
        let params = init_model_for::<f64>(fw, &cfg, 31).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let batch = vec![
            build_example(fw, &[6, 7, 8], &[9, 10, 11], &ocfg, &mut rng).unwrap(),
            build_example(fw, &[12, 13], &[14, 15], &ocfg, &mut rng).unwrap(),
        ];
        // the 1e-5 output scale keeps finite-difference noise below the
        // comparison's absolute floor; see the module docs
        let report = finite_difference_check(
            params.named(),
            |_| Ok(batch_loss(&batch, &params, &cfg)?.scale(1e-5)),
            1e-5,
            16,
            fw as u64,
        )
        .unwrap();
        println!(
            "{:<11} max rel error {:.3e} over {} coordinates  ({})",
            fw.to_string(),
            report.max_rel_error,
            report.coords_checked,
            if report.passed() { "pass" } else { "FAIL" }
        );
    }
}
