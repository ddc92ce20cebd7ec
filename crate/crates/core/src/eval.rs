//! Role and agent average precision over predicted triplets.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Role, Target};
use crate::error::EvalError;
use crate::geometry::{iou, BBox};
use crate::inference::ScoredTriplet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the monotone precision envelope at every recall change.
    #[default]
    AllPoint,
    /// Mean of the envelope at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// A new detection may take over a ground truth from an earlier one when
    /// that one can move to another ground truth: true positives at every
    /// rank are a maximum matching.
    #[default]
    Maximal,
    /// Each detection takes its best-overlapping ground truth if still free.
    Greedy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_thresh: f64,
    /// Also require the predicted object category to match.
    pub require_object_category: bool,
    pub interpolation: Interpolation,
    pub matcher: Matcher,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresh: 0.5,
            require_object_category: false,
            interpolation: Interpolation::AllPoint,
            matcher: Matcher::Maximal,
        }
    }
}

/// Average precision from per-detection hit flags, already ordered by
/// descending score. `None` when there is no ground truth.
pub fn average_precision(hits: &[bool], num_gt: usize, interp: Interpolation) -> Option<f64> {
    if num_gt == 0 {
        return None;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (i, &h) in hits.iter().enumerate() {
        tp += h as usize;
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    // envelope: best precision at this rank or later
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    Some(match interp {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_r = 0.0;
            for (r, p) in recall.iter().zip(&precision) {
                ap += (r - prev_r) * p;
                prev_r = *r;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .position(|&r| r >= t - 1e-12)
                        .map_or(0.0, |i| precision[i])
                })
                .sum::<f64>()
                / 11.0
        }
    })
}

/// Hit flags for detections in the given order. `candidates[d]` lists the
/// ground truths detection `d` may claim, best overlap first.
pub fn match_detections(candidates: &[Vec<usize>], num_gt: usize, matcher: Matcher) -> Vec<bool> {
    let mut owner: Vec<Option<usize>> = vec![None; num_gt];
    let mut hits = vec![false; candidates.len()];
    for d in 0..candidates.len() {
        hits[d] = match matcher {
            Matcher::Greedy => match candidates[d].first() {
                Some(&g) if owner[g].is_none() => {
                    owner[g] = Some(d);
                    true
                }
                _ => false,
            },
            Matcher::Maximal => {
                let mut seen = vec![false; num_gt];
                augment(d, candidates, &mut owner, &mut seen)
            }
        };
    }
    hits
}

fn augment(d: usize, cand: &[Vec<usize>], owner: &mut [Option<usize>], seen: &mut [bool]) -> bool {
    for &g in &cand[d] {
        if seen[g] {
            continue;
        }
        seen[g] = true;
        let free = match owner[g] {
            None => true,
            Some(o) => augment(o, cand, owner, seen),
        };
        if free {
            owner[g] = Some(d);
            return true;
        }
    }
    false
}

#[derive(Debug, Clone, PartialEq)]
struct GtItem {
    human: BBox,
    /// `None`: target not annotated; only a target-less prediction matches.
    target: Option<(BBox, usize)>,
    ignore: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    pub label: String,
    pub action: String,
    pub role: Role,
    /// `None` when the class has no ground truth; such classes are left out
    /// of the mean.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_predictions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub role: Vec<ApEntry>,
    pub agent: Vec<ApEntry>,
    pub mean_role_ap: Option<f64>,
    pub mean_agent_ap: Option<f64>,
    pub config: EvalConfig,
}

fn mean_ap(entries: &[ApEntry]) -> Option<f64> {
    let aps: Vec<f64> = entries.iter().filter_map(|e| e.ap).collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

impl ApReport {
    /// Classes without ground truth.
    pub fn skipped(&self) -> Vec<&str> {
        self.role
            .iter()
            .chain(&self.agent)
            .filter(|e| e.ap.is_none())
            .map(|e| e.label.as_str())
            .collect()
    }

    pub fn role_ap(&self, label: &str) -> Option<f64> {
        self.role.iter().find(|e| e.label == label).and_then(|e| e.ap)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let fmt = |ap: Option<f64>| ap.map_or_else(|| "   n/a".to_string(), |a| format!("{:6.2}", 100.0 * a));
        for (title, rows, mean) in [
            ("role AP", &self.role, self.mean_role_ap),
            ("agent AP", &self.agent, self.mean_agent_ap),
        ] {
            let _ = writeln!(s, "{title:<28} {:>6} {:>6} {:>6}", "AP", "gt", "pred");
            for e in rows {
                let _ = writeln!(
                    s,
                    "  {:<26} {} {:>6} {:>6}{}",
                    e.label,
                    fmt(e.ap),
                    e.num_gt,
                    e.num_predictions,
                    if e.ap.is_none() { "  (no ground truth, skipped)" } else { "" }
                );
            }
            let _ = writeln!(s, "  {:<26} {}", "mean", fmt(mean));
        }
        s
    }
}

/// Read predictions written one JSON object per line. Blank lines are
/// skipped; errors carry the 1-based line number.
pub fn read_predictions<R: BufRead>(r: R) -> Result<Vec<ScoredTriplet>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: ScoredTriplet = serde_json::from_str(&line).map_err(|e| EvalError::Prediction {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !t.score.is_finite() {
            return Err(EvalError::Prediction {
                line: i + 1,
                message: "non-finite score".into(),
            });
        }
        out.push(t);
    }
    Ok(out)
}

fn role_gt(dataset: &Dataset) -> HashMap<(usize, u64), Vec<GtItem>> {
    let mut gt: HashMap<(usize, u64), Vec<GtItem>> = HashMap::new();
    for scene in &dataset.scenes {
        for it in &scene.interactions {
            let spec = dataset.registry.entry(it.entry);
            if spec.slot.is_none() {
                continue;
            }
            let target = it.target.map(|t| (scene.target_box(t), scene.target_category(t)));
            let ignore = matches!(it.target, Some(Target::Object(o)) if scene.objects[o].ignore);
            let item = GtItem {
                human: scene.persons[it.person],
                target,
                ignore,
            };
            let list = gt.entry((it.entry, scene.image_id)).or_default();
            if !list.contains(&item) {
                list.push(item);
            }
        }
    }
    gt
}

fn role_match(p: &ScoredTriplet, g: &GtItem, cfg: &EvalConfig) -> Option<f64> {
    let ih = iou(&p.human_box, &g.human);
    if ih < cfg.iou_thresh {
        return None;
    }
    match (&p.object_box, &g.target) {
        (None, None) => Some(ih),
        (Some(pb), Some((gb, gc))) => {
            if cfg.require_object_category && p.object_category != Some(*gc) {
                return None;
            }
            let io = iou(pb, gb);
            (io >= cfg.iou_thresh).then_some(ih.min(io))
        }
        _ => None,
    }
}

/// Score-ordered hit flags and ground-truth count for one class. Detections
/// that only overlap ignored ground truth are dropped from the ranking.
fn class_hits<P>(
    preds: &[(u64, P, f64)],
    gt: &HashMap<u64, Vec<GtItem>>,
    overlap: impl Fn(&P, &GtItem) -> Option<f64>,
    matcher: Matcher,
) -> (Vec<bool>, usize) {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].2.total_cmp(&preds[a].2));
    // global ground-truth numbering over counted items
    let mut index: HashMap<(u64, usize), usize> = HashMap::new();
    let mut images: Vec<&u64> = gt.keys().collect();
    images.sort();
    for img in images {
        for (k, g) in gt[img].iter().enumerate() {
            if !g.ignore {
                let n = index.len();
                index.insert((*img, k), n);
            }
        }
    }
    let mut cands = Vec::with_capacity(order.len());
    for &d in &order {
        let (img, p, _) = &preds[d];
        let Some(items) = gt.get(img) else {
            cands.push(Vec::new());
            continue;
        };
        let mut scored: Vec<(f64, usize)> = Vec::new();
        let mut ignored_overlap = false;
        for (k, g) in items.iter().enumerate() {
            if let Some(o) = overlap(p, g) {
                match index.get(&(*img, k)) {
                    Some(&gi) => scored.push((o, gi)),
                    None => ignored_overlap = true,
                }
            }
        }
        if scored.is_empty() && ignored_overlap {
            continue;
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        cands.push(scored.into_iter().map(|(_, g)| g).collect());
    }
    (match_detections(&cands, index.len(), matcher), index.len())
}

/// Role AP for every entry with a target and agent AP for every verb.
pub fn evaluate(dataset: &Dataset, preds: &[ScoredTriplet], cfg: &EvalConfig) -> Result<ApReport, EvalError> {
    let reg = &dataset.registry;
    let mut by_entry: Vec<Vec<(u64, &ScoredTriplet, f64)>> = vec![Vec::new(); reg.entries().len()];
    // best triplet of each (image, human, verb), for agent detections
    let mut agent_best: BTreeMap<(u64, usize, usize), &ScoredTriplet> = BTreeMap::new();
    for p in preds {
        let e = reg
            .entry_index(&p.action, p.role)
            .ok_or_else(|| EvalError::UnknownAction(format!("{} ({})", p.action, p.role.as_str())))?;
        by_entry[e].push((p.image_id, p, p.score));
        let key = (p.image_id, p.human_index, reg.entry(e).verb);
        let slot = agent_best.entry(key).or_insert(p);
        if p.score > slot.score {
            *slot = p;
        }
    }

    let gt = role_gt(dataset);
    let mut role = Vec::new();
    for s in 0..reg.num_slots() {
        let e = reg.slot_entry(s);
        let spec = reg.entry(e);
        let per_image: HashMap<u64, Vec<GtItem>> = gt
            .iter()
            .filter(|((ge, _), _)| *ge == e)
            .map(|((_, img), v)| (*img, v.clone()))
            .collect();
        let (hits, num_gt) = class_hits(&by_entry[e], &per_image, |p, g| role_match(p, g, cfg), cfg.matcher);
        role.push(ApEntry {
            label: reg.entry_label(e),
            action: spec.name.clone(),
            role: spec.role,
            ap: average_precision(&hits, num_gt, cfg.interpolation),
            num_gt,
            num_predictions: by_entry[e].len(),
        });
    }

    let mut agent = Vec::new();
    for (vi, v) in reg.verbs().iter().enumerate() {
        let mut per_image: HashMap<u64, Vec<GtItem>> = HashMap::new();
        for scene in &dataset.scenes {
            let mut persons: Vec<usize> = scene
                .interactions
                .iter()
                .filter(|it| reg.entry(it.entry).verb == vi)
                .map(|it| it.person)
                .collect();
            persons.sort();
            persons.dedup();
            if !persons.is_empty() {
                per_image.insert(
                    scene.image_id,
                    persons
                        .into_iter()
                        .map(|p| GtItem {
                            human: scene.persons[p],
                            target: None,
                            ignore: false,
                        })
                        .collect(),
                );
            }
        }
        let dets: Vec<(u64, BBox, f64)> = agent_best
            .iter()
            .filter(|((_, _, verb), _)| *verb == vi)
            .map(|((img, _, _), t)| (*img, t.human_box, t.human_score * t.action_score))
            .collect();
        let overlap = |b: &BBox, g: &GtItem| {
            let o = iou(b, &g.human);
            (o >= cfg.iou_thresh).then_some(o)
        };
        let (hits, num_gt) = class_hits(&dets, &per_image, overlap, cfg.matcher);
        agent.push(ApEntry {
            label: v.name.clone(),
            action: v.name.clone(),
            role: Role::None,
            ap: average_precision(&hits, num_gt, cfg.interpolation),
            num_gt,
            num_predictions: dets.len(),
        });
    }

    Ok(ApReport {
        mean_role_ap: mean_ap(&role),
        mean_agent_ap: mean_ap(&agent),
        role,
        agent,
        config: cfg.clone(),
    })
}

/// Ground truth written as predictions with unit scores. Scoring these
/// gives AP 1 on every class that has ground truth.
pub fn ground_truth_predictions(dataset: &Dataset) -> Vec<ScoredTriplet> {
    let reg = &dataset.registry;
    let mut out = Vec::new();
    for scene in &dataset.scenes {
        for it in &scene.interactions {
            let spec = reg.entry(it.entry);
            let target = it.target.map(|t| (scene.target_box(t), scene.target_category(t)));
            out.push(ScoredTriplet {
                image_id: scene.image_id,
                human_index: it.person,
                human_box: scene.persons[it.person],
                human_score: 1.0,
                action: spec.name.clone(),
                role: spec.role,
                object_box: target.map(|t| t.0),
                object_category: target.map(|t| t.1),
                object_score: target.map(|_| 1.0),
                action_score: 1.0,
                compat: target.map(|_| 1.0),
                score: 1.0,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_hand_examples() {
        let ap = |h: &[bool], n| average_precision(h, n, Interpolation::AllPoint).unwrap();
        assert_eq!(ap(&[true, true], 2), 1.0);
        assert_eq!(ap(&[false, false], 2), 0.0);
        // precision 1/2 at recall 1/2, 2/3 at recall 1
        assert!((ap(&[false, true, true], 2) - (0.5 * 2.0 / 3.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert!((ap(&[true, false, true], 2) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        // missed ground truth caps recall
        assert_eq!(ap(&[true], 4), 0.25);
        assert_eq!(average_precision(&[true], 0, Interpolation::AllPoint), None);
        let eleven = average_precision(&[true], 2, Interpolation::ElevenPoint).unwrap();
        assert!((eleven - 6.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn maximal_matching_reassigns() {
        // detection 0 can take a or b; detection 1 only a
        let cands = vec![vec![0, 1], vec![0]];
        assert_eq!(match_detections(&cands, 2, Matcher::Maximal), vec![true, true]);
        assert_eq!(match_detections(&cands, 2, Matcher::Greedy), vec![true, false]);
        // duplicates of a single ground truth
        let dup = vec![vec![0], vec![0], vec![0]];
        assert_eq!(match_detections(&dup, 1, Matcher::Maximal), vec![true, false, false]);
    }

    fn brute_max_matching(cands: &[Vec<usize>], num_gt: usize) -> usize {
        fn go(d: usize, c: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
            if d == c.len() {
                return 0;
            }
            let mut best = go(d + 1, c, used);
            for &g in &c[d] {
                if !used[g] {
                    used[g] = true;
                    best = best.max(1 + go(d + 1, c, used));
                    used[g] = false;
                }
            }
            best
        }
        go(0, cands, &mut vec![false; num_gt])
    }

    proptest! {
        #[test]
        fn maximal_hits_are_max_matchings_of_every_prefix(
            raw in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 0..7)
        ) {
            let cands: Vec<Vec<usize>> = raw.into_iter().map(|mut v| { v.dedup(); v }).collect();
            let hits = match_detections(&cands, 4, Matcher::Maximal);
            for k in 0..=cands.len() {
                let tp = hits[..k].iter().filter(|h| **h).count();
                prop_assert_eq!(tp, brute_max_matching(&cands[..k], 4));
            }
            // greedy never finds more
            let g = match_detections(&cands, 4, Matcher::Greedy).iter().filter(|h| **h).count();
            prop_assert!(g <= hits.iter().filter(|h| **h).count());
        }

        #[test]
        fn ap_is_bounded_and_monotone_in_hits(
            hits in prop::collection::vec(any::<bool>(), 1..30), extra in 0usize..5
        ) {
            let n = hits.iter().filter(|h| **h).count() + extra;
            prop_assume!(n > 0);
            let ap = average_precision(&hits, n, Interpolation::AllPoint).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            // turning the first miss into a hit cannot lower AP
            if let Some(i) = hits.iter().position(|h| !h) {
                let mut better = hits.clone();
                better[i] = true;
                let ap2 = average_precision(&better, n + 1, Interpolation::AllPoint).unwrap();
                let ap1 = average_precision(&hits, n + 1, Interpolation::AllPoint).unwrap();
                prop_assert!(ap2 >= ap1 - 1e-12);
            }
        }
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        use crate::dataset::synthetic::{generate_synthetic, SynthConfig};
        let ds = generate_synthetic(&SynthConfig {
            scenes: 30,
            seed: 4,
            ..SynthConfig::default()
        });
        let preds = ground_truth_predictions(&ds);
        for matcher in [Matcher::Maximal, Matcher::Greedy] {
            let cfg = EvalConfig {
                matcher,
                require_object_category: true,
                ..EvalConfig::default()
            };
            let rep = evaluate(&ds, &preds, &cfg).unwrap();
            assert_eq!(rep.mean_role_ap, Some(1.0));
            assert_eq!(rep.mean_agent_ap, Some(1.0));
            assert!(rep.role.iter().all(|e| e.ap.is_none_or(|a| a == 1.0)));
        }
        // dropping half the predictions halves recall on the affected classes
        let half: Vec<_> = preds.iter().step_by(2).cloned().collect();
        let rep = evaluate(&ds, &half, &EvalConfig::default()).unwrap();
        assert!(rep.mean_role_ap.unwrap() < 0.8);
    }

    #[test]
    fn unannotated_target_needs_targetless_prediction() {
        let h = BBox::new(0.0, 0.0, 10.0, 20.0).unwrap();
        let o = BBox::new(5.0, 5.0, 15.0, 15.0).unwrap();
        let g = GtItem {
            human: h,
            target: None,
            ignore: false,
        };
        let mut p = ScoredTriplet {
            image_id: 0,
            human_index: 0,
            human_box: h,
            human_score: 1.0,
            action: "x".into(),
            role: Role::Object,
            object_box: None,
            object_category: None,
            object_score: None,
            action_score: 1.0,
            compat: None,
            score: 1.0,
        };
        let cfg = EvalConfig::default();
        assert_eq!(role_match(&p, &g, &cfg), Some(1.0));
        p.object_box = Some(o);
        assert_eq!(role_match(&p, &g, &cfg), None);
    }

    #[test]
    fn read_predictions_reports_line_numbers() {
        let good = r#"{"image_id":1,"human_index":0,"human_box":[0,0,1,1],"human_score":0.5,"action":"smile","role":"none","action_score":0.5,"score":0.25}"#;
        let text = format!("{good}\n\n{good}\nnot json\n");
        match read_predictions(text.as_bytes()) {
            Err(EvalError::Prediction { line, .. }) => assert_eq!(line, 4),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(read_predictions(format!("{good}\n\n{good}\n").as_bytes()).unwrap().len(), 2);
    }
}
