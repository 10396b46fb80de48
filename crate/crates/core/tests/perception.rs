mod common;

use common::*;
use deepmon::perception::{
    detect_batch, ground_relation, query_vision, random_scene, score_scene, Camera, DetectorModel, Features,
    NoiseProfile, RelationConfig, View, VisionConfig, RELATIONS,
};
use deepmon::symbolic::{State, Vocabulary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn two_box_view(seed: u64) -> (deepmon::perception::Scene, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b) = rand_pair(&mut rng);
    let cam = rand_camera(&mut rng);
    let mut s = scene(cam, vec![obj("a", a.min, a.max), obj("b", b.min, b.max)]);
    s.camera = cam;
    (s, cam)
}

#[test]
fn zero_noise_relations_match_oracle() {
    let cfg = RelationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..2000 {
        let (a, b) = rand_pair(&mut rng);
        let cam = rand_camera(&mut rng);
        let s = scene(cam, vec![obj("a", a.min, a.max), obj("b", b.min, b.max)]);
        let view = View::truth(&s);
        for rule in RULES2 {
            let got = ground_relation(rule, &["a", "b"], &view, &cfg).unwrap();
            assert_eq!(got, oracle2(rule, &a, &b, &cam, &cfg), "{rule} {a:?} {b:?}");
        }
    }
}

proptest! {
    #[test]
    fn view_relations_are_antisymmetric(seed in any::<u64>()) {
        let (s, _) = two_box_view(seed);
        let view = View::truth(&s);
        let cfg = RelationConfig::default();
        let g = |r: &str, x: &str, y: &str| ground_relation(r, &[x, y], &view, &cfg).unwrap();
        for (p, q) in [("Left", "Right"), ("InFront", "Behind")] {
            prop_assert_eq!(g(p, "a", "b"), g(q, "b", "a"));
            prop_assert!(!(g(p, "a", "b") && g(q, "a", "b")));
        }
        prop_assert_eq!(g("On", "a", "b"), g("Under", "b", "a"));
    }

    #[test]
    fn clear_iff_nothing_on_top(seed in any::<u64>()) {
        let (s, _) = two_box_view(seed);
        let view = View::truth(&s);
        let cfg = RelationConfig::default();
        let clear = ground_relation("Clear", &["b"], &view, &cfg).unwrap();
        let on = ground_relation("On", &["a", "b"], &view, &cfg).unwrap();
        prop_assert_eq!(clear, !on);
    }

    #[test]
    fn missing_argument_is_false(rule in prop::sample::select(RULES2.to_vec())) {
        let (s, _) = two_box_view(1);
        let view = View::truth(&s);
        prop_assert!(!ground_relation(rule, &["a", "ghost"], &view, &RelationConfig::default()).unwrap());
    }
}

#[test]
fn unknown_rule_and_bad_arity_are_errors() {
    let (s, _) = two_box_view(2);
    let view = View::truth(&s);
    let cfg = RelationConfig::default();
    assert!(ground_relation("Levitating", &["a"], &view, &cfg).is_err());
    assert!(ground_relation("On", &["a"], &view, &cfg).is_err());
    for r in RELATIONS {
        assert!(deepmon::perception::relation_arity(r).is_some());
    }
}

fn one_object_scene() -> deepmon::perception::Scene {
    let cam = Camera::default();
    scene(cam, vec![obj("box", [1.4, -0.1, 0.0], [1.6, 0.1, 0.3]), obj("cup", [1.4, 0.3, 0.0], [1.5, 0.4, 0.1])])
}

#[test]
fn voting_beats_single_frame() {
    let s = one_object_scene();
    let noise = NoiseProfile { tp_rate: 0.6, ..NoiseProfile::default() };
    let rate = |n: usize| {
        let mut m = DetectorModel::new(noise.clone(), 11);
        let trials = 2000;
        let hits: usize = (0..trials)
            .map(|_| detect_batch(&s, &s.camera, &mut m, n).iter().filter(|d| d.label == "box").count())
            .sum();
        hits as f64 / trials as f64
    };
    let (single, voted) = (rate(1), rate(10));
    assert!((single - 0.6).abs() < 0.05, "single-frame rate {single}");
    assert!(voted >= single, "{voted} < {single}");
}

fn binom_cdf(n: u64, p: f64, k: u64) -> f64 {
    let mut c = 1.0;
    let mut total = 0.0;
    for i in 0..=n {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        if i <= k {
            total += c * p.powi(i as i32) * (1.0 - p).powi((n - i) as i32);
        }
    }
    total
}

#[test]
fn two_label_confusion_matches_binomial() {
    let s = one_object_scene();
    let noise = NoiseProfile { confusion: 0.3, ..NoiseProfile::default() };
    let mut m = DetectorModel::new(noise, 5);
    let trials = 4000;
    let mut right = [0usize; 2];
    for _ in 0..trials {
        for d in detect_batch(&s, &s.camera, &mut m, 10) {
            right[d.object] += (d.label == s.objects[d.object].class) as usize;
        }
    }
    // ties go to the lexicographically first label: "box" keeps 5-5 splits
    let expect = [binom_cdf(10, 0.3, 5), binom_cdf(10, 0.3, 4)];
    for i in 0..2 {
        let got = right[i] as f64 / trials as f64;
        assert!((got - expect[i]).abs() < 0.025, "object {i}: {got} vs {}", expect[i]);
    }
}

#[test]
fn voting_recovers_confused_labels() {
    let noise = NoiseProfile { confusion: 0.3, ..NoiseProfile::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut m = DetectorModel::new(noise, 5);
    let (mut right, mut total) = (0usize, 0usize);
    for _ in 0..1000 {
        let s = random_scene(&mut rng);
        for d in detect_batch(&s, &s.camera, &mut m, 10) {
            total += 1;
            right += (d.label == s.objects[d.object].class) as usize;
        }
    }
    let rate = right as f64 / total as f64;
    assert!(rate >= 0.95, "recovery {rate} over {total} detections");
}

#[test]
fn voting_never_hurts_grounding() {
    let cfg = RelationConfig::default();
    for tp in [0.5, 0.7, 0.9] {
        let noise = NoiseProfile { tp_rate: tp, confusion: 0.1, bbox_jitter: 2.0, depth_sigma: 0.01, ..NoiseProfile::default() };
        let acc = |batch: usize| {
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let mut m = DetectorModel::new(noise.clone(), 29);
            let mut score = deepmon::perception::GroundingScore::default();
            for _ in 0..150 {
                let s = random_scene(&mut rng);
                score.merge(&score_scene(&s, &mut m, Features::FULL, &cfg, batch));
            }
            score.mean()
        };
        let (one, ten) = (acc(1), acc(10));
        assert!(ten >= one, "tp {tp}: n=10 {ten} < n=1 {one}");
    }
}

fn tiny_vocab() -> Vocabulary {
    Vocabulary::parse_toml(
        r#"
[separators]
eos = "EOS"
ets = "ETS"
eoa = "EOA"

[[sorts]]
name = "object"
kind = "world"

[[terms]]
name = "box"
sort = "object"

[[terms]]
name = "cup"
sort = "object"

[[predicates]]
name = "Detected"
args = ["object"]
grounding = "Found"

[[predicates]]
name = "LeftOf"
args = ["object", "object"]
grounding = "Left"
"#,
    )
    .unwrap()
}

#[test]
fn query_vision_searches_behind_the_robot() {
    let v = tiny_vocab();
    let mut s = one_object_scene();
    s.camera.yaw = std::f64::consts::PI;
    let mut m = DetectorModel::perfect(1);
    let q = State::parse("Detected(box)").unwrap();
    let r = query_vision(&q, &s, &s.camera, &mut m, &v, &VisionConfig::default());
    assert!(r.holds);
    assert!(r.search_steps > 0);
    assert!(r.depth > 0.0);

    let none = query_vision(&q, &s, &s.camera, &mut m, &v, &VisionConfig { tau: 0, ..VisionConfig::default() });
    assert!(!none.holds);
    assert_eq!(none.depth, -1.0);
}

#[test]
fn query_vision_agrees_with_truth_when_noise_free() {
    let v = tiny_vocab();
    let s = one_object_scene();
    let mut m = DetectorModel::perfect(1);
    let yes = State::parse("Detected(box); Detected(cup); LeftOf(box, cup)").unwrap();
    let no = State::parse("LeftOf(cup, box)").unwrap();
    let cfg = VisionConfig::default();
    // cup is at +y, which is to the camera's left when looking along +x
    assert!(!query_vision(&yes, &s, &s.camera, &mut m, &v, &cfg).holds);
    assert!(query_vision(&no, &s, &s.camera, &mut m, &v, &cfg).holds);
    assert!(query_vision(&State::new(), &s, &s.camera, &mut m, &v, &cfg).holds);
}
