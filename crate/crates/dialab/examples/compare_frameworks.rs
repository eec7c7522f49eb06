//! Small-data comparison across all seven frameworks: fine-tune each on a
//! 200-sample subset (pretrained init) and render the comparison table with
//! significance stars against the best per column.
//!
//! ```bash
//! cargo run --example compare_frameworks
//! ```

use dialab::data::{synth_samples, SynthOutput, SynthTask, Vocab};
use dialab::decode::{beam_search, DecodeModel, DecodeParams};
use dialab::layout::ALL_FRAMEWORKS;
use dialab::metrics::{evaluate, render_comparison, MetricsReport};
use dialab::models::{finetune, pretrain, PretrainObjective, TrainHyper};
use dialab::transformer::ModelConfig;

fn main() {
    let SynthOutput::Dialogue(all) = synth_samples(SynthTask::Reverse, 500, 7).unwrap() else {
        unreachable!()
    };
    let SynthOutput::Text(lines) = synth_samples(SynthTask::GrammarLm, 2000, 9).unwrap() else {
        unreachable!()
    };
    let train = &all[..400];
    let test = &all[400..460];
    let mut texts: Vec<String> = lines.clone();
    for s in &all {
        texts.extend(s.history.iter().cloned());
        texts.push(s.response.clone());
    }
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str()), 1);
    let config = ModelConfig::desk_default(vocab.len());
    let sentences: Vec<Vec<usize>> = lines.iter().map(|l| vocab.tokenize(l)).collect();

    let pre_hyper = TrainHyper {
        steps: 600,
        seed: 11,
        ..TrainHyper::default()
    };
    println!("pretraining gpt-style (ar) and bert-style (mlm) checkpoints...");
    let ar = pretrain(&config, &sentences, PretrainObjective::Ar, &pre_hyper, |_, _| {}).unwrap();
    let mlm = pretrain(&config, &sentences, PretrainObjective::Mlm, &pre_hyper, |_, _| {}).unwrap();

    let refs: Vec<String> = test.iter().map(|s| s.response.clone()).collect();
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for fw in ALL_FRAMEWORKS {
        let init = match fw.expected_lineage() {
            PretrainObjective::Ar => &ar,
            _ => &mlm,
        };
        let hyper = TrainHyper {
            steps: 400,
            seed: 21,
            subset: Some(200),
            ..TrainHyper::default()
        };
        print!("fine-tuning {:<11}", fw.to_string());
        let ckpt = finetune(fw, Some(init), &config, train, &vocab, &hyper, false, |_, _| {}).unwrap();
        let params = ckpt.to_params::<f32>().unwrap();
        let model = DecodeModel {
            config: &config,
            params: &params,
        };
        let dparams = DecodeParams {
            framework: fw,
            beam_size: 4,
            min_len: 1,
            max_len: 12,
            interval: 5,
        };
        let hyps: Vec<String> = test
            .iter()
            .map(|s| {
                let (src, _) = s.encode(&vocab);
                vocab.detokenize(&beam_search(&model, &src, &dparams).unwrap().tokens)
            })
            .collect();
        let report = evaluate(&hyps, &refs).unwrap();
        println!("BLEU-1 {:.2}", report.bleu1);
        rows.push((fw.label().to_string(), report));
    }
    println!("\n200-sample fine-tune, two-sided t-tests against the best per column:\n");
    print!("{}", render_comparison(&rows));
}
