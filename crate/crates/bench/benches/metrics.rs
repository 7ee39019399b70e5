use criterion::{criterion_group, criterion_main, Criterion};
use ndarray::{Array2, Array3};
use rirci_core::metrics::{mask_f1_iou, psnr, rmse_w, ssim};
use rirci_core::{BinaryMask, ImageTensor};

fn image(size: usize, phase: f64) -> ImageTensor {
    ImageTensor::new(Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
        0.5 + 0.4 * ((x as f64 * 0.13 + y as f64 * 0.07 + c as f64 + phase).sin())
    }))
    .unwrap()
}

fn metrics(c: &mut Criterion) {
    let size = 256;
    let (a, b) = (image(size, 0.0), image(size, 0.3));
    let mask = BinaryMask::new(Array2::from_shape_fn((size, size), |(y, x)| u8::from(x > y))).unwrap();
    let prob = Array2::from_shape_fn((size, size), |(y, x)| ((x + y) % 7) as f64 / 6.0);

    c.bench_function("psnr_256", |bench| bench.iter(|| psnr(&a, &b).unwrap()));
    c.bench_function("ssim_256", |bench| bench.iter(|| ssim(&a, &b).unwrap()));
    c.bench_function("rmse_w_256", |bench| bench.iter(|| rmse_w(&a, &b, &mask).unwrap()));
    c.bench_function("f1_iou_256", |bench| bench.iter(|| mask_f1_iou(&prob, &mask, 0.5).unwrap()));
}

criterion_group!(benches, metrics);
criterion_main!(benches);
