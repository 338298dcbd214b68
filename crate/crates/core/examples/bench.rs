use touchspot::config::SpotConfig;
use touchspot::synth::{generate_dataset, SynthParams};
use touchspot::train::train;
use touchspot::infer::{predict_dataset, PredictFlags};
use touchspot::eval::{collect_eval_videos, pooled_map};

fn main() {
    let params = SynthParams { num_frames: 48, seed: 1, ..SynthParams::default() };
    let train_videos = generate_dataset(60, &params).unwrap();
    let test_videos = generate_dataset(20, &SynthParams { seed: 999, ..params.clone() }).unwrap();
    let anns: Vec<_> = test_videos.iter().map(|v| v.annotation.clone()).collect();

    for seed in [11u64, 12, 13] {
        let base = SpotConfig {
            epochs: 6,
            clips_per_epoch: 150,
            seed,
            ..SpotConfig::desk()
        };
        let full = base.clone();
        let only_attn = SpotConfig { hard_labels: true, lambda_g: 0.0, ..base.clone() };
        let mut results = vec![];
        for (label, cfg, flags) in [
            ("full", full, PredictFlags::full()),
            ("only_attn", only_attn, PredictFlags { use_tor: false, use_snms: true }),
        ] {
            let (model, _) = train(&train_videos, &cfg, None).unwrap();
            let (dets, _) = predict_dataset(&model, &test_videos, &cfg, flags).unwrap();
            let evals = collect_eval_videos(&dets, &anns);
            let (map, per) = pooled_map(&evals, &cfg.tolerances).unwrap();
            println!("seed {seed} {label}: mAP {:.4} {:?}", map,
                per.iter().map(|(d, a)| format!("d{d}={a:.3}")).collect::<Vec<_>>());
            results.push(map);
        }
        println!("seed {seed} margin = {:.4}", results[0] - results[1]);
    }
}
