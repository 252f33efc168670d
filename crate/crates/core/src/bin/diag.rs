// Temporary diagnostic: raw head output statistics on clean vs corrupted
// inputs. Not part of the deliverable surface.

use trfeddis::checkpoint::checkpoint_read;
use trfeddis::config::ExperimentConfig;
use trfeddis::data::corrupt_gaussian;
use trfeddis::federation::build_datasets;
use trfeddis::ndtensor::{Graph, Mode, Tensor};
use trfeddis::specfun::{RngStream, StreamPurpose};

fn stats(name: &str, t: &Tensor<f32>) {
    let n = t.data.len() as f64;
    let mean = t.data.iter().map(|v| *v as f64).sum::<f64>() / n;
    let max = t.data.iter().cloned().fold(f32::MIN, f32::max);
    let min = t.data.iter().cloned().fold(f32::MAX, f32::min);
    let pos = t.data.iter().filter(|v| **v > 0.0).count() as f64 / n;
    // per-sample max (winning raw logit)
    let k = t.shape[1];
    let mut wins = Vec::new();
    for row in t.data.chunks(k) {
        wins.push(row.iter().cloned().fold(f32::MIN, f32::max));
    }
    wins.sort_by(|a, b| a.partial_cmp(b).unwrap());
    println!(
        "{name}: mean {mean:.2} min {min:.2} max {max:.2} frac_pos {pos:.2} win_p10 {:.2} win_p50 {:.2} win_p90 {:.2}",
        wins[wins.len() / 10],
        wins[wins.len() / 2],
        wins[9 * wins.len() / 10]
    );
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let cfg = ExperimentConfig::load(std::path::Path::new(&args[1])).unwrap();
    let ckpt = std::path::Path::new(&args[2]);
    let sigma: f64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1.5);
    let datasets = build_datasets(&cfg).unwrap();
    for client in 0..datasets.len().min(2) {
        let mut model =
            checkpoint_read(cfg.model.clone(), &ckpt.join(format!("client{client}.ckpt")))
                .unwrap();
        let ds = &datasets[client];
        let idx: Vec<usize> = (0..200.min(ds.test().len())).collect();
        let (clean_x, _) = ds.test().gather(&idx);
        let mut rng = RngStream::derive(0, StreamPurpose::Corrupt, client as u64);
        let noisy_x = corrupt_gaussian(&clean_x, sigma, &mut rng);
        for (tag, x) in [("clean", &clean_x), ("noisy", &noisy_x)] {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let xv = g.constant(x.clone());
            let (_, raw_g, raw_l) = model.forward(&mut g, &bound, xv, Mode::Eval).unwrap();
            println!("client {client} {tag}:");
            stats("  raw_g", g.value(raw_g));
            stats("  raw_l", g.value(raw_l));
        }
    }
}
