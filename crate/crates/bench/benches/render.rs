//! Throughput of the pixel renderers (both map backends) and of the full
//! image-formation forward model, on scene sizes close to the test configs.

use criterion::{criterion_group, criterion_main, Criterion, Throughput};
use nalgebra::Vector3;
use rand::Rng;

use hdrslam_core::geometry::{CameraIntrinsics, ExposureWindow, Pose, Twist};
use hdrslam_core::img::PixelSet;
use hdrslam_core::imaging::ToneMapper;
use hdrslam_core::map::{GaussianMap, RadianceMap, VoxelMap};
use hdrslam_core::model::form_image;
use hdrslam_core::seedstream;

/// A box room with emissive walls: floor-to-ceiling content so rays do real
/// accumulation work instead of exiting early.
fn voxel_scene() -> RadianceMap {
    let n = 48;
    let half = 3.2;
    let mut map = VoxelMap::uniform(
        [n, n, n],
        Vector3::new(-half, -half, -half),
        Vector3::new(half, half, half),
        32,
        0.05,
        8.0,
        -6.0,
        [0.0; 3],
    );
    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let edge = ix < 3 || iy < 3 || iz < 3 || ix >= n - 3 || iy >= n - 3 || iz >= n - 3;
                if edge {
                    let idx = map.node_index(ix, iy, iz);
                    let p = map.node_position(ix, iy, iz);
                    map.density_raw[idx] = 10.0;
                    for ch in 0..3 {
                        map.color_raw[3 * idx + ch] = (0.4 + 0.1 * p[ch]).abs().ln();
                    }
                }
            }
        }
    }
    RadianceMap::Voxel(map)
}

fn gaussian_scene() -> RadianceMap {
    let mut rng = seedstream::stream(1, "bench/gaussians");
    let mut map = GaussianMap::empty();
    for _ in 0..600 {
        let center = Vector3::new(
            rng.gen_range(-2.5..2.5),
            rng.gen_range(-2.5..2.5),
            rng.gen_range(0.5..5.0),
        );
        map.push(
            center,
            rng.gen_range(-2.5f64..-1.0),
            rng.gen_range(-1.0..3.0),
            [rng.gen_range(-1.5..0.5); 3],
        );
    }
    RadianceMap::Gaussian(map)
}

fn bench_render_pixels(c: &mut Criterion) {
    let intr = CameraIntrinsics::from_fov(96, 72, 1.2);
    let pose = Pose::identity();
    let mut rng = seedstream::stream(2, "bench/pixels");
    let pixels = PixelSet::sample(&mut rng, intr.width, intr.height, 512);

    let mut group = c.benchmark_group("render_pixels");
    group.throughput(Throughput::Elements(pixels.len() as u64));
    for (name, map) in [("voxel", voxel_scene()), ("gaussian", gaussian_scene())] {
        group.bench_function(name, |b| {
            b.iter(|| map.render_pixels(&pose, &intr, &pixels));
        });
    }
    group.finish();
}

fn bench_form_image(c: &mut Criterion) {
    let intr = CameraIntrinsics::from_fov(96, 72, 1.2);
    let map = voxel_scene();
    let tone = ToneMapper::new(vec![(0.5f64 / 30.0).ln()]);
    let mut vel = Twist::zero();
    vel.rot = Vector3::new(0.0, 0.6, 0.0);
    vel.trans = Vector3::new(0.3, 0.0, 0.0);
    let window = ExposureWindow::new(0, 0.5, 1.0 / 60.0, Pose::identity(), vel).unwrap();
    let mut rng = seedstream::stream(3, "bench/pixels");
    let pixels = PixelSet::sample(&mut rng, intr.width, intr.height, 512);

    let mut group = c.benchmark_group("form_image");
    group.throughput(Throughput::Elements(pixels.len() as u64));
    for n_cam in [1usize, 5] {
        group.bench_function(format!("ncam{n_cam}"), |b| {
            b.iter(|| form_image(&map, &window, &tone, 0, &intr, n_cam, &pixels));
        });
    }
    group.finish();
}

criterion_group!(benches, bench_render_pixels, bench_form_image);
criterion_main!(benches);
