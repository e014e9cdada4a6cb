use coeforge::geometry::{iou, max_pairwise_iou};
use coeforge::grpo::SyntheticWorld;
use coeforge::parser::{parse_response, serialize_trajectory};
use coeforge::rewards::total_reward;
use coeforge::textmatch::{recall, soft_em};
use coeforge::{BoundingBox, CoETrajectory, EvidenceRef, ReasoningStep, RewardConfig};
use proptest::prelude::*;
use proptest::sample::select;

fn boxes() -> impl Strategy<Value = BoundingBox> {
    (0.0..500.0f64, 0.0..500.0f64, 0.5..300.0f64, 0.5..300.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

fn naive_max(b: &[BoundingBox]) -> f64 {
    let mut m: f64 = 0.0;
    for i in 0..b.len() {
        for j in 0..b.len() {
            if i != j {
                m = m.max(iou(&b[i], &b[j]));
            }
        }
    }
    m
}

const WORDS: &[&str] = &["cat", "dog", "the", "a", "value", "97", "degrees", "Obama!"];

fn text() -> impl Strategy<Value = String> {
    prop::collection::vec(select(WORDS), 1..6).prop_map(|w| w.join(" "))
}

fn evidence() -> impl Strategy<Value = EvidenceRef> {
    (1u32..4, boxes()).prop_map(|(p, b)| EvidenceRef::new(p, b))
}

fn trajectory() -> impl Strategy<Value = CoETrajectory> {
    (
        prop::collection::vec(
            (text(), prop::collection::vec(evidence(), 0..3))
                .prop_map(|(t, e)| ReasoningStep::new(t, e)),
            1..5,
        ),
        text(),
        evidence(),
    )
        .prop_map(|(steps, answer, ev)| {
            let in_chain = steps.iter().any(|s| s.evidence.contains(&ev));
            CoETrajectory {
                steps,
                answer_text: answer,
                answer_evidence: Some(ev),
                raw: String::new(),
                format_ok: true,
                answer_evidence_in_chain: in_chain,
            }
        })
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let x = iou(&a, &b);
        prop_assert_eq!(x, iou(&b, &a));
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_pairwise_matches_naive_under_permutation(
        v in prop::collection::vec(boxes(), 0..7).prop_shuffle()
    ) {
        prop_assert_eq!(max_pairwise_iou(&v), naive_max(&v));
        let mut r = v.clone();
        r.reverse();
        prop_assert_eq!(max_pairwise_iou(&r), max_pairwise_iou(&v));
    }

    #[test]
    fn recall_is_bounded_and_order_free(a in text(), gt in text()) {
        if let Ok(r) = recall(&a, &gt) {
            prop_assert!((0.0..=1.0).contains(&r));
            let rev: Vec<&str> = a.split_whitespace().rev().collect();
            prop_assert_eq!(recall(&rev.join(" "), &gt).unwrap(), r);
            prop_assert_eq!(recall(&gt, &gt).unwrap(), 1.0);
            prop_assert_eq!(soft_em(&gt, &gt), 1);
        }
    }

    #[test]
    fn serialize_parse_round_trip(t in trajectory()) {
        let raw = serialize_trajectory(&t).unwrap();
        let back = parse_response(&raw).trajectory;
        prop_assert!(back.same_structure(&t), "{}", raw);
    }

    #[test]
    fn truncated_responses_score_minus_one(cut in 0usize..400) {
        let world = SyntheticWorld::default();
        let raw = world.templates[0].render().unwrap();
        let cut = raw.len().saturating_sub(cut + 1);
        let cut = (0..=cut).rev().find(|i| raw.is_char_boundary(*i)).unwrap();
        let b = total_reward(
            &raw[..cut],
            &world.record().unwrap(),
            &world.encoder().unwrap(),
            &RewardConfig::default(),
        )
        .unwrap();
        prop_assert_eq!(b.total, -1.0);
    }
}
