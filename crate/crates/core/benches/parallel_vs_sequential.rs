use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uio_core::data_io::synth::shapes_image;
use uio_core::model::{patchify, with_eos, EncoderInput, Model, ModelConfig};
use uio_core::par;
use uio_core::raster::RasterImage;
use uio_core::sampler::{default_group_rates, DatasetEntry, GroupEntry, Mixture, MixtureSpec};
use uio_core::trainer::batch_grads;
use uio_core::vocab::VocabLayout;
use uio_core::vq::{heldout_mse, quantize_latents, VqConfig, VqModel};
use uio_core::nn::Tensor;

const MODES: [(&str, bool); 2] = [("parallel", false), ("sequential", true)];

fn grads(c: &mut Criterion) {
    let model = Model::new(ModelConfig::preset("micro").unwrap(), VocabLayout::new(200, 40, 32).unwrap(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = model.cfg.patch_size;
    let batch: Vec<_> = (0..8)
        .map(|_| {
            let r = RasterImage::new(2 * p, 2 * p, 3, (0..4 * p * p * 3).map(|_| rng.random()).collect()).unwrap();
            let input = EncoderInput { text: (0..6).map(|_| rng.random_range(2..200)).collect(), image: Some(patchify(&r, p).unwrap()) };
            let target: Vec<usize> = (0..8).map(|_| rng.random_range(2..200)).collect();
            (input, with_eos(&target))
        })
        .collect();
    let mut g = c.benchmark_group("batch_grads");
    g.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| batch_grads(&model, &batch).unwrap()));
    }
    par::set_sequential(false);
    g.finish();
}

fn sampler(c: &mut Criterion) {
    let spec = MixtureSpec {
        temperature: 2.0,
        groups: default_group_rates()
            .iter()
            .map(|(g, r)| GroupEntry {
                id: format!("{g:?}"),
                rate: *r,
                datasets: (0..4).map(|i| DatasetEntry { id: format!("d{i}"), size: 100.0 * (i + 1) as f64 }).collect(),
            })
            .collect(),
    };
    let mix = Mixture::new(spec).unwrap();
    let mut g = c.benchmark_group("sample_batch");
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| mix.sample_batch(4096, 7, 3)));
    }
    par::set_sequential(false);
    g.finish();
}

fn vq(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cb = Tensor::from_vec(512, 16, (0..512 * 16).map(|_| rng.random_range(-1.0..1.0)).collect());
    let z = Tensor::from_vec(4096, 16, (0..4096 * 16).map(|_| rng.random_range(-1.0..1.0)).collect());
    let model = VqModel::new(VqConfig::preset("toy").unwrap(), 4).unwrap();
    let images: Vec<_> = (0..8).map(|_| shapes_image(32, 32, &mut rng)).collect();
    let mut g = c.benchmark_group("vq");
    g.sample_size(10);
    for (name, seq) in MODES {
        par::set_sequential(seq);
        g.bench_function(BenchmarkId::new("quantize", name), |b| b.iter(|| quantize_latents(&z, &cb).unwrap()));
        g.bench_function(BenchmarkId::new("heldout_mse", name), |b| b.iter(|| heldout_mse(&model, &images).unwrap()));
    }
    par::set_sequential(false);
    g.finish();
}

criterion_group!(benches, grads, sampler, vq);
criterion_main!(benches);
