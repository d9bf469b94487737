//! Scratch probe: utility-classifier sample efficiency on the real split.
use cloak_core::nets::{AuxTrainOpts, EmbedderConfig};
use cloak_core::phantom::{self, Split};
use cloak_core::pipeline::spread_subset;
use cloak_core::risk::{utility_preservation_eval, UtilityVariant};
use std::time::Instant;

fn main() {
    let data = std::path::Path::new("/tmp/tune/run2/dataset");
    let train = phantom::load_split::<f32>(data, Split::Train).unwrap();
    let test = phantom::load_split::<f32>(data, Split::Test).unwrap();
    let test_labels: Vec<Vec<u8>> = test.labels.clone();
    let cfg = EmbedderConfig {
        resolution: 32,
        channels: vec![8, 12, 16, 24],
        embed_dim: 32,
        n_out: train.n_labels,
    };
    let fl = train.float_labels();
    for n in [48usize, 96, 144, 192] {
        let idx = spread_subset(&train.patient_ids, n);
        let images: Vec<_> = idx.iter().map(|&i| train.images[i].clone()).collect();
        let labels: Vec<_> = idx.iter().map(|&i| fl[i].clone()).collect();
        for (steps, lr) in [(1600usize, 1e-3), (1200, 3e-3)] {
            let t0 = Instant::now();
            let out = utility_preservation_eval(
                &[UtilityVariant { name: format!("n{n}"), images: &images, labels: &labels }],
                &test.images,
                &test_labels,
                &cfg,
                &AuxTrainOpts { steps, batch_size: 8, lr, seed: 15 },
            )
            .unwrap();
            let s = &out[0].1;
            println!(
                "n={n:3} steps={steps} lr={lr:.0e}: acc {:.3} AP {:.3} AUROC {:.3} F1 {:.3}  ({:.0}s)",
                s.acc,
                s.ap,
                s.auroc,
                s.f1,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
