//! Metric fixtures and a significance-test demo.
//!
//! ```bash
//! cargo run --example metrics_report
//! ```

use dialab::metrics::{
    bleu_n, cider, distinct_n, evaluate, render_comparison, significance_stars, t_test,
};

fn s(v: &[&str]) -> Vec<String> {
    v.iter().map(|x| x.to_string()).collect()
}

fn main() {
    println!("-- corpus BLEU --");
    let h = s(&["a b c"]);
    let r = s(&["a b d"]);
    println!("hyp 'a b c' vs ref 'a b d':");
    println!("  BLEU-1 {:.2}", bleu_n(&h, &r, 1).unwrap());
    println!("  BLEU-2 {:.2}", bleu_n(&h, &r, 2).unwrap());

    println!("\n-- Distinct --");
    let hyps = s(&["a b a", "b c"]);
    println!(
        "['a b a', 'b c']: Distinct-1 = {:.2}",
        distinct_n(&hyps, 1).unwrap()
    );

    println!("\n-- CIDEr --");
    let c = s(&[
        "the red robot sees a cloud",
        "a quiet cat guards the lamp",
        "pilots paint tall stones",
    ]);
    println!("identical hyp/ref pairs: {:.4}", cider(&c, &c).unwrap());

    println!("\n-- Welch t-test --");
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [2.0, 3.0, 4.0, 5.0, 6.0];
    let t = t_test(&a, &b).unwrap();
    println!(
        "[1..5] vs [2..6]: t = {:.3}, df = {:.1}, p = {:.4} ({})",
        t.t,
        t.df,
        t.p,
        significance_stars(t.p)
    );

    println!("\n-- full report + comparison table --");
    let refs = s(&["the robot sees a cloud", "a cat guards the lamp", "pilots paint stones"]);
    let good = s(&["the robot sees a cloud", "a cat guards the lamp", "pilots paint stones"]);
    let rough = s(&["the robot sees cloud now", "cat lamp", "pilots paint"]);
    let r1 = evaluate(&good, &refs).unwrap();
    let r2 = evaluate(&rough, &refs).unwrap();
    print!("{}", r1.render_table("exact"));
    println!();
    print!(
        "{}",
        render_comparison(&[("exact".to_string(), r1), ("rough".to_string(), r2)])
    );
    println!("\nkey=value form:");
    let again = evaluate(&rough, &refs).unwrap();
    print!("{}", again.render_keyvalues());
}
