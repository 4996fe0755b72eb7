//! Rendered frames through the background prefilter and template detector.

use mcball::detector::{DetectorConfig, TemplateDetector};
use mcball::eval::{eval_3d, MatchCriterion, Report};
use mcball::sim::{generate, Dataset, RigLayout, SimConfig};
use mcball::tracker::{run_sequence, Pipeline, Status, Strategy, TrackerConfig};

fn small_pitch(seed: u64) -> Dataset {
    let config = SimConfig {
        seed,
        n_frames: 60,
        render: true,
        distractors: 3,
        occlusion_fraction: 0.25,
        occlusion_min_len: 10,
        occlusion_max_len: 20,
        layout: RigLayout {
            court_length: 24.0,
            court_width: 14.0,
            n_cameras: 8,
            mount_height: 6.0,
            mount_offset: 4.0,
            focal_px: 420.0,
            image_width: 480,
            image_height: 288,
            min_coverage: 3,
            ..RigLayout::default()
        },
        ..SimConfig::default()
    };
    generate(&config).unwrap()
}

#[test]
fn template_detector_tracks_rendered_ball() {
    let d = small_pitch(17);
    let det = TemplateDetector::new(DetectorConfig::default(), 1.0, 5.0);
    let mut p = Pipeline::new(&d.rig, &det, TrackerConfig::default()).with_court(&d.court);
    let (out, stats) = run_sequence(&mut p, &d, Strategy::M3).unwrap();
    assert_eq!(out.len(), 60);
    assert_eq!(stats.full_image_frames, 1);
    let ok = out.iter().filter(|o| o.status == Status::Ok).count();
    assert!(ok >= 54, "{ok} OK frames");
    let (p3, r3) = eval_3d(&out, &d.truth3d, 0.5).unwrap().precision_recall();
    assert!(p3 >= 0.9 && r3 >= 0.9, "3D precision {p3} recall {r3}");
    let report = Report::build(&out, &d.groundtruth, &d.truth3d, &[MatchCriterion::Dist3dM(0.5)], 0.5).unwrap();
    for cam in &report.cameras {
        let (p, _) = cam.results[0].counts.precision_recall();
        assert!(p >= 0.95, "camera {} precision {p}", cam.camera);
    }
}

#[test]
fn periodic_detection_interpolates_between_hits() {
    let d = small_pitch(17);
    let det = TemplateDetector::new(DetectorConfig::default(), 1.0, 5.0);
    let mut p = Pipeline::new(&d.rig, &det, TrackerConfig::default()).with_court(&d.court);
    let (out, stats) = run_sequence(&mut p, &d, Strategy::m1()).unwrap();
    assert_eq!(stats.full_image_frames, 12);
    assert!(out.iter().any(|o| o.status == Status::Interpolated));
    for o in &out {
        if o.status == Status::Interpolated {
            assert!(o.point3d.is_some() && o.per_camera_2d.is_empty());
        }
    }
    let (p3, r3) = eval_3d(&out, &d.truth3d, 0.5).unwrap().precision_recall();
    assert!(p3 >= 0.85 && r3 >= 0.85, "3D precision {p3} recall {r3}");
}
