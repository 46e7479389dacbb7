use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use movgan::data::{
    dataset_stats, parse_annotations, read_cache, refine, sample_clip, stratum_sizes, write_cache, DatasetStats,
    ImageDirSource,
};
use movgan::rng::stream;
use movgan::Error;

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/annotations")
}

fn strata(pairs: &[(usize, usize)]) -> BTreeMap<usize, usize> {
    pairs.iter().copied().collect()
}

#[test]
fn fixture_parses_with_clamping_counts() {
    let set = parse_annotations(&fixture()).unwrap();
    assert_eq!(set.records.len(), 11);
    assert_eq!(set.categories, ["bird", "car", "cat", "dog", "person"]);
    assert_eq!((set.clamped_boxes, set.dropped_boxes), (1, 1));
    assert_eq!(
        dataset_stats(&set.records),
        DatasetStats {
            videos: 11,
            categories: 5,
            valid_frames: 25,
            max_instance: 21
        }
    );
    // The clamped box ends at the frame border.
    let v01 = &set.records[1];
    assert_eq!(v01.frames[0].instances()[0].bbox.x1(), 1.0);
}

#[test]
fn refinement_at_eleven_instances() {
    let set = parse_annotations(&fixture()).unwrap();
    let (kept, stats) = refine(&set.records, 11, false, 0);
    let ids: Vec<&str> = kept.iter().map(|r| r.video_id.as_str()).collect();
    assert_eq!(ids, ["v00", "v01", "v02", "v03", "v04", "v05", "v06"]);
    assert_eq!(
        stats,
        DatasetStats {
            videos: 7,
            categories: 3,
            valid_frames: 19,
            max_instance: 3
        }
    );
    assert!(kept.iter().all(|r| r.frames.iter().all(|f| !f.is_empty())));
    assert_eq!(stratum_sizes(&kept), strata(&[(1, 4), (2, 2), (3, 1)]));

    let (balanced, stats) = refine(&set.records, 11, true, 0);
    assert_eq!(stratum_sizes(&balanced), strata(&[(1, 2), (2, 2), (3, 1)]));
    assert_eq!(stats.videos, 5);
}

#[test]
fn refinement_at_twenty_instances() {
    let set = parse_annotations(&fixture()).unwrap();
    let (kept, stats) = refine(&set.records, 20, false, 0);
    assert_eq!(
        stats,
        DatasetStats {
            videos: 9,
            categories: 5,
            valid_frames: 23,
            max_instance: 15
        }
    );
    assert_eq!(stratum_sizes(&kept), strata(&[(1, 4), (2, 2), (3, 1), (12, 1), (15, 1)]));

    let (balanced, stats) = refine(&set.records, 20, true, 0);
    assert_eq!(stratum_sizes(&balanced), strata(&[(1, 1), (2, 1), (3, 1), (12, 1), (15, 1)]));
    assert_eq!((stats.videos, stats.max_instance), (5, 15));
}

#[test]
fn refinement_is_idempotent() {
    let set = parse_annotations(&fixture()).unwrap();
    for (max, balance) in [(11, false), (11, true), (20, false), (20, true)] {
        let (once, s1) = refine(&set.records, max, balance, 7);
        let (twice, s2) = refine(&once, max, balance, 7);
        assert_eq!(once, twice);
        assert_eq!(s1, s2);
    }
}

#[test]
fn balancing_depends_only_on_the_seed() {
    let set = parse_annotations(&fixture()).unwrap();
    let ids = |seed| {
        refine(&set.records, 11, true, seed)
            .0
            .into_iter()
            .map(|r| r.video_id)
            .collect::<Vec<_>>()
    };
    assert_eq!(ids(3), ids(3));
    assert!((0..20).any(|s| ids(s) != ids(3)));
}

#[test]
fn stats_serialize_with_table_fields() {
    let set = parse_annotations(&fixture()).unwrap();
    let (_, stats) = refine(&set.records, 11, false, 0);
    let v: serde_json::Value = serde_json::to_value(stats).unwrap();
    let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["categories", "max_instance", "valid_frames", "videos"]);
}

fn write_json(dir: &Path, name: &str, value: serde_json::Value) {
    std::fs::write(dir.join(name), value.to_string()).unwrap();
}

#[test]
fn undeclared_track_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    write_json(
        dir.path(),
        "bad.json",
        serde_json::json!({
            "video_id": "bad", "frame_count": 1, "width": 10, "height": 10,
            "subject/objects": [{"tid": 0, "category": "cat"}],
            "trajectories": [[{"tid": 4, "bbox": {"xmin": 1, "ymin": 1, "xmax": 5, "ymax": 5}}]]
        }),
    );
    match parse_annotations(dir.path()) {
        Err(Error::Parse { video_id, field, .. }) => assert_eq!((video_id.as_str(), field.as_str()), ("bad", "trajectories")),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn empty_directory_gives_an_empty_set() {
    let dir = tempfile::tempdir().unwrap();
    let set = parse_annotations(dir.path()).unwrap();
    assert!(set.records.is_empty() && set.categories.is_empty());
    let (kept, stats) = refine(&set.records, 11, true, 0);
    assert!(kept.is_empty());
    assert_eq!(stats, DatasetStats::default());
}

/// Frames whose color encodes their index; sampled clips must show the
/// frames their layouts describe.
#[test]
fn sampled_clips_align_frames_with_layouts() {
    let dir = tempfile::tempdir().unwrap();
    let (w, h) = (24u32, 16u32);
    let frames = 7;
    let mut trajectories = Vec::new();
    let frame_dir = dir.path().join("frames").join("vid");
    std::fs::create_dir_all(&frame_dir).unwrap();
    for f in 0..frames {
        let level = (f * 30) as u8;
        let img = image::RgbImage::from_pixel(w, h, image::Rgb([level, 255 - level, 0]));
        img.save(frame_dir.join(format!("{f:06}.png"))).unwrap();
        // Frame 3 is unannotated, so only frames 4..7 hold a 3-frame window
        // besides 0..3.
        if f == 3 {
            trajectories.push(serde_json::json!([]));
        } else {
            let x = 2 * f as u32;
            trajectories.push(serde_json::json!([{"tid": 1, "bbox": {"xmin": x, "ymin": 2, "xmax": x + 6, "ymax": 10}}]));
        }
    }
    let ann = dir.path().join("ann");
    std::fs::create_dir_all(&ann).unwrap();
    write_json(
        &ann,
        "vid.json",
        serde_json::json!({
            "video_id": "vid", "frame_count": frames, "width": w, "height": h,
            "subject/objects": [{"tid": 1, "category": "ball"}],
            "trajectories": trajectories
        }),
    );
    let set = parse_annotations(&ann).unwrap();
    let (records, _) = refine(&set.records, 11, false, 0);
    let source = ImageDirSource {
        root: dir.path().to_path_buf(),
    };
    let mut starts = std::collections::BTreeSet::new();
    for seed in 0..16 {
        let c = sample_clip(&records[0], &source, 3, 8, false, &mut stream(seed, &[])).unwrap().unwrap();
        starts.insert(c.start_frame);
        for t in 0..3 {
            let original = c.start_frame + t;
            assert_ne!(original, 3);
            let x0 = (2 * original) as f64 / w as f64;
            assert!((c.layouts[t].instances()[0].bbox.x0() - x0).abs() < 1e-12);
            assert_eq!(c.layouts[t].frame_index(), t);
            let red = c.clip.frame(t).unwrap().get(0).unwrap().mean_all().unwrap().to_scalar::<f32>().unwrap();
            let expected = (original * 30) as f32 / 127.5 - 1.0;
            assert!((red - expected).abs() < 1e-5, "frame {original}: {red} vs {expected}");
        }
    }
    assert_eq!(starts, [0, 4].into_iter().collect());
    assert!(sample_clip(&records[0], &source, 4, 8, false, &mut stream(0, &[])).unwrap().is_none());

    let cache = dir.path().join("clips.bin");
    let c = sample_clip(&records[0], &source, 3, 8, true, &mut stream(1, &[])).unwrap().unwrap();
    write_cache(&cache, std::slice::from_ref(&c)).unwrap();
    let back = read_cache(&cache).unwrap();
    assert_eq!(back[0].layouts, c.layouts);
    assert_eq!(back[0].clip.to_f32_vec().unwrap(), c.clip.to_f32_vec().unwrap());
}
