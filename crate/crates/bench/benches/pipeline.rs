use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use mcball::detector::{DetectorConfig, TemplateDetector};
use mcball::fusion::{
    refine_point_lm, schur_step, vote_consensus, LmSettings, Observation, SbaCamera, SbaObservation, SbaPoint,
    SbaProblem,
};
use mcball::geometry::{Camera, CameraIntrinsics, CameraPose, PixelPoint, WorldPoint};
use mcball::raster::{connected_components, GrayFrame, Mask, RoiBox};
use mcball::sim::{build_rig, generate, RigLayout, SimConfig};
use mcball::tracker::{run_sequence, Pipeline, Strategy, TrackerConfig};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fusion(c: &mut Criterion) {
    let rig = build_rig(&RigLayout::default()).unwrap();
    let p = WorldPoint::new(40.0, 25.0, 1.5);
    let obs: Vec<Observation> = rig
        .cameras()
        .iter()
        .filter_map(|cam| cam.project_visible(&p).map(|px| Observation::new(cam.id, px, 0.95)))
        .collect();
    c.bench_function("vote_consensus/36 cameras", |b| {
        b.iter(|| vote_consensus(black_box(&obs), &rig, 0.5).unwrap())
    });
    let start = p + Vector3::new(0.3, -0.2, 0.1);
    c.bench_function("refine_point_lm/36 cameras", |b| {
        b.iter(|| refine_point_lm(black_box(&start), &obs, &rig, &LmSettings::default()).unwrap())
    });
}

fn sba(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k = CameraIntrinsics::simple(1000.0, 1000.0, 640.0, 360.0).unwrap();
    let cameras: Vec<SbaCamera> = (0..8)
        .map(|j| {
            let a = j as f64 / 8.0 * std::f64::consts::TAU;
            let eye = WorldPoint::new(20.0 * a.cos(), 20.0 * a.sin(), 8.0);
            let pose = CameraPose::look_at(&eye, &WorldPoint::origin(), &Vector3::z()).unwrap();
            SbaCamera {
                camera: Camera::new(j, k, pose, 1280, 720).unwrap(),
                frozen: j == 0,
            }
        })
        .collect();
    let points: Vec<SbaPoint> = (0..50)
        .map(|_| SbaPoint {
            position: WorldPoint::new(
                rng.random_range(-3.0..3.0),
                rng.random_range(-3.0..3.0),
                rng.random_range(0.0..2.0),
            ),
            frozen: false,
        })
        .collect();
    let mut observations = Vec::new();
    for (i, p) in points.iter().enumerate() {
        for (j, cam) in cameras.iter().enumerate() {
            let (px, _) = cam.camera.project(&p.position).unwrap();
            observations.push(SbaObservation::new(
                i,
                j,
                PixelPoint::new(px.u + rng.random_range(-1.0..1.0), px.v),
            ));
        }
    }
    let problem = SbaProblem {
        cameras,
        points,
        observations,
    };
    c.bench_function("schur_step/m=8 n=50", |b| {
        b.iter(|| schur_step(black_box(&problem), 1e-3).unwrap())
    });
}

fn raster(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mask = Mask::new(640, 360, (0..640 * 360).map(|_| rng.random_bool(0.05)).collect());
    c.bench_function("connected_components/640x360", |b| {
        b.iter(|| connected_components(black_box(&mask)))
    });

    let mut frame = GrayFrame::filled(320, 320, 90);
    for y in 150..160 {
        for x in 150..160 {
            frame.set(x, y, 230);
        }
    }
    let det = TemplateDetector::new(DetectorConfig::default(), 3.0, 6.0);
    let roi = [RoiBox::new(120, 120, 64, 64)];
    let full = [RoiBox::full(320, 320)];
    c.bench_function("template/64px window", |b| {
        b.iter(|| det.detect_frame(black_box(&frame), &roi))
    });
    c.bench_function("template/320px frame", |b| {
        b.iter(|| det.detect_frame(black_box(&frame), &full))
    });
}

fn sequence(c: &mut Criterion) {
    let d = generate(&SimConfig {
        seed: 3,
        n_frames: 100,
        ..SimConfig::default()
    })
    .unwrap();
    let det = d.oracle_detector(3);
    let mut group = c.benchmark_group("sequence/100 frames 36 cameras");
    group.sample_size(10);
    for s in [Strategy::m1(), Strategy::m2(), Strategy::M3] {
        group.bench_function(s.name(), |b| {
            b.iter_batched(
                || Pipeline::new(&d.rig, &det, TrackerConfig::default()).with_court(&d.court),
                |mut p| run_sequence(&mut p, &d, s).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, fusion, sba, raster, sequence);
criterion_main!(benches);
