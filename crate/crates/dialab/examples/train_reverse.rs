//! End-to-end pipeline on the reverse task for one framework: synthesize
//! data, pretrain a masked LM, fine-tune PF-free, generate with beam search,
//! and score the output.
//!
//! ```bash
//! cargo run --example train_reverse
//! ```

use dialab::data::{synth_samples, SynthOutput, SynthTask, Vocab};
use dialab::decode::{beam_search, prefix_accuracy, DecodeModel, DecodeParams};
use dialab::layout::Framework;
use dialab::metrics::evaluate;
use dialab::models::{finetune, pretrain, PretrainObjective, TrainHyper};
use dialab::transformer::ModelConfig;

fn main() {
    let framework = Framework::PfFree;
    let SynthOutput::Dialogue(all) = synth_samples(SynthTask::Reverse, 1100, 7).unwrap() else {
        unreachable!()
    };
    let SynthOutput::Text(lines) = synth_samples(SynthTask::GrammarLm, 2000, 9).unwrap() else {
        unreachable!()
    };
    let train = &all[..1000];
    let test = &all[1000..1050];
    let mut texts: Vec<String> = lines.clone();
    for s in &all {
        texts.extend(s.history.iter().cloned());
        texts.push(s.response.clone());
    }
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str()), 1);
    let config = ModelConfig::desk_default(vocab.len());
    println!("vocab {} tokens, model {}x{} hidden {}", vocab.len(), config.layers, config.heads, config.hidden);

    let sentences: Vec<Vec<usize>> = lines.iter().map(|l| vocab.tokenize(l)).collect();
    let pre_hyper = TrainHyper {
        steps: 600,
        seed: 11,
        ..TrainHyper::default()
    };
    println!("\npretraining (mlm objective, {} steps)...", pre_hyper.steps);
    let ckpt = pretrain(&config, &sentences, PretrainObjective::Mlm, &pre_hyper, |step, loss| {
        if step % 200 == 0 {
            println!("  step {step} loss {loss:.4}");
        }
    })
    .unwrap();

    let ft_hyper = TrainHyper {
        steps: 800,
        seed: 13,
        ..TrainHyper::default()
    };
    println!("\nfine-tuning {framework} ({} steps)...", ft_hyper.steps);
    let model_ckpt = finetune(
        framework,
        Some(&ckpt),
        &config,
        train,
        &vocab,
        &ft_hyper,
        false,
        |step, loss| {
            if step % 200 == 0 {
                println!("  step {step} loss {loss:.4}");
            }
        },
    )
    .unwrap();

    let params = model_ckpt.to_params::<f32>().unwrap();
    let model = DecodeModel {
        config: &config,
        params: &params,
    };
    let pairs: Vec<(Vec<usize>, Vec<usize>)> = test.iter().map(|s| s.encode(&vocab)).collect();
    let acc = prefix_accuracy(&model, framework, 5, &pairs).unwrap();
    println!("\nheld-out prefix token accuracy: {acc:.3}");

    let dparams = DecodeParams {
        framework,
        beam_size: 4,
        min_len: 1,
        max_len: 12,
        interval: 5,
    };
    let mut hyps = Vec::new();
    for (src, _) in &pairs {
        let out = beam_search(&model, src, &dparams).unwrap();
        hyps.push(vocab.detokenize(&out.tokens));
    }
    let refs: Vec<String> = test.iter().map(|s| s.response.clone()).collect();
    let report = evaluate(&hyps, &refs).unwrap();
    println!();
    print!("{}", report.render_table(framework.label()));
    println!("\nsample generations:");
    for i in 0..3 {
        println!("  history : {}", test[i].history.join(" [SEP] "));
        println!("  gold    : {}", test[i].response);
        println!("  model   : {}", hyps[i]);
    }
}
