//! Sequence preparation and embedding lookups.
//!
//! Sequences are left-padded to a fixed window: the most recent `l_seq`
//! records occupy the trailing slots, earlier slots are padding with mask 0.
//! Each valid slot embeds as item + position + behavior row; padded slots are
//! exactly zero so downstream masking stays airtight.

use crate::autodiff::{Tape, Var};
use crate::data::InteractionRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSequence {
    /// Item id per slot (0 in padded slots, masked out).
    pub items: Vec<usize>,
    /// Behavior id per slot (0 in padded slots, masked out).
    pub behaviors: Vec<usize>,
    /// Position-embedding index per slot (the slot index itself).
    pub positions: Vec<usize>,
    /// 1.0 for a real record, 0.0 for padding.
    pub mask: Vec<f64>,
    pub n_valid: usize,
}

impl PreparedSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Left-pad/truncate a chronological record slice into a fixed window of
/// `l_seq` slots keeping the most recent records.
pub fn prepare_sequence(records: &[InteractionRecord], l_seq: usize) -> PreparedSequence {
    assert!(l_seq > 0, "sequence window must be positive");
    let n_valid = records.len().min(l_seq);
    let tail = &records[records.len() - n_valid..];
    let pad = l_seq - n_valid;
    let mut items = vec![0usize; l_seq];
    let mut behaviors = vec![0usize; l_seq];
    let mut mask = vec![0.0; l_seq];
    for (i, r) in tail.iter().enumerate() {
        items[pad + i] = r.item;
        behaviors[pad + i] = r.behavior;
        mask[pad + i] = 1.0;
    }
    PreparedSequence { items, behaviors, positions: (0..l_seq).collect(), mask, n_valid }
}

/// Embed a prepared sequence on the tape: row t = item[t] + pos[t] +
/// behavior[t], zeroed on padded slots. Indices are bounds-checked against the
/// actual table shapes with the offending table named in the error.
pub fn embed_sequence(
    tape: &mut Tape,
    item_table: Var,
    pos_table: Var,
    behavior_table: Var,
    prep: &PreparedSequence,
) -> Result<Var> {
    let checks: [(&str, &[usize], usize); 3] = [
        ("items", &prep.items, tape.value(item_table).rows()),
        ("positions", &prep.positions, tape.value(pos_table).rows()),
        ("behaviors", &prep.behaviors, tape.value(behavior_table).rows()),
    ];
    for (table, idx, bound) in checks {
        for &i in idx {
            if i >= bound {
                return Err(Error::Bounds {
                    table: table.into(),
                    what: "row".into(),
                    index: i,
                    bound,
                });
            }
        }
    }
    let e_item = tape.gather_rows(item_table, &prep.items);
    let e_pos = tape.gather_rows(pos_table, &prep.positions);
    let e_beh = tape.gather_rows(behavior_table, &prep.behaviors);
    let s = tape.add(e_item, e_pos);
    let s = tape.add(s, e_beh);
    Ok(tape.scale_rows(s, &prep.mask))
}

/// Row weights selecting the slots of one behavior: 1.0 where the slot is
/// valid and carries behavior `b`, else 0.0. `behaviors` may contain sentinel
/// values (e.g. for injected prompt rows) which match no view.
pub fn behavior_view_mask(behaviors: &[usize], mask: &[f64], b: usize) -> Vec<f64> {
    assert_eq!(behaviors.len(), mask.len());
    behaviors.iter().zip(mask).map(|(&bi, &m)| if bi == b && m != 0.0 { 1.0 } else { 0.0 }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::backward;
    use crate::tensor::Tensor;

    fn rec(item: usize, behavior: usize, t: i64) -> InteractionRecord {
        InteractionRecord { user: 0, item, timestamp: t, behavior }
    }

    #[test]
    fn prepare_pads_left_and_truncates_to_tail() {
        let recs: Vec<_> = (0..3).map(|i| rec(i + 10, 0, i as i64)).collect();
        let p = prepare_sequence(&recs, 5);
        assert_eq!(p.items, vec![0, 0, 10, 11, 12]);
        assert_eq!(p.mask, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(p.n_valid, 3);

        let long: Vec<_> = (0..8).map(|i| rec(i, 0, i as i64)).collect();
        let p = prepare_sequence(&long, 5);
        assert_eq!(p.items, vec![3, 4, 5, 6, 7]); // most recent five
        assert_eq!(p.n_valid, 5);
        assert!(p.mask.iter().all(|&m| m == 1.0));
    }

    #[test]
    fn embeds_by_hand_at_d2() {
        let mut tape = Tape::new();
        let item = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let pos = tape.leaf(Tensor::from_rows(&[vec![0.1, 0.1], vec![0.2, 0.2], vec![0.3, 0.3]]));
        let beh = tape.leaf(Tensor::from_rows(&[vec![10.0, 20.0], vec![30.0, 40.0]]));
        let p = prepare_sequence(&[rec(1, 0, 0), rec(0, 1, 1)], 3);
        let e = embed_sequence(&mut tape, item, pos, beh, &p).unwrap();
        let v = tape.value(e);
        assert_eq!(v.row(0), &[0.0, 0.0]); // padded
        // slot 1: item 1 + pos 1 + behavior 0
        assert_eq!(v.row(1), &[3.0 + 0.2 + 10.0, 4.0 + 0.2 + 20.0]);
        // slot 2: item 0 + pos 2 + behavior 1
        assert_eq!(v.row(2), &[1.0 + 0.3 + 30.0, 2.0 + 0.3 + 40.0]);
    }

    #[test]
    fn zero_tables_embed_to_zero_and_lookup_is_linear_in_tables() {
        let p = prepare_sequence(&[rec(0, 0, 0), rec(2, 1, 1)], 4);
        let run = |it: Tensor, po: Tensor, be: Tensor| {
            let mut tape = Tape::new();
            let (i, o, b) = (tape.leaf(it), tape.leaf(po), tape.leaf(be));
            let e = embed_sequence(&mut tape, i, o, b, &p).unwrap();
            tape.value(e).clone()
        };
        let z = run(Tensor::zeros(3, 2), Tensor::zeros(4, 2), Tensor::zeros(2, 2));
        assert!(z.data().iter().all(|&x| x == 0.0));

        let mut rng = crate::rng::substream(4, "embed-test");
        use rand::Rng;
        let mut t = |r, c| Tensor::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let (i1, o1, b1) = (t(3, 2), t(4, 2), t(2, 2));
        let (i2, o2, b2) = (t(3, 2), t(4, 2), t(2, 2));
        let sum_tables = run(
            {
                let mut s = i1.clone();
                s.add_assign(&i2);
                s
            },
            {
                let mut s = o1.clone();
                s.add_assign(&o2);
                s
            },
            {
                let mut s = b1.clone();
                s.add_assign(&b2);
                s
            },
        );
        let mut sum_embeds = run(i1, o1, b1);
        sum_embeds.add_assign(&run(i2, o2, b2));
        for (a, b) in sum_tables.data().iter().zip(sum_embeds.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn repeated_items_accumulate_gradient_rows() {
        // Item 1 appears twice: d(sum)/d(item_row_1) doubles; padded slot's
        // index-0 row receives nothing despite being gathered.
        let mut tape = Tape::new();
        let item = tape.leaf(Tensor::zeros(3, 2));
        let pos = tape.leaf(Tensor::zeros(4, 2));
        let beh = tape.leaf(Tensor::zeros(1, 2));
        let p = prepare_sequence(&[rec(1, 0, 0), rec(2, 0, 1), rec(1, 0, 2)], 4);
        let e = embed_sequence(&mut tape, item, pos, beh, &p).unwrap();
        let loss = tape.sum(e);
        let grads = backward(&tape, loss);
        let gi = grads.get(item).unwrap();
        assert_eq!(gi.row(0), &[0.0, 0.0]);
        assert_eq!(gi.row(1), &[2.0, 2.0]);
        assert_eq!(gi.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn out_of_bounds_index_names_the_table() {
        let mut tape = Tape::new();
        let item = tape.leaf(Tensor::zeros(2, 2));
        let pos = tape.leaf(Tensor::zeros(8, 2));
        let beh = tape.leaf(Tensor::zeros(2, 2));
        let p = prepare_sequence(&[rec(5, 0, 0)], 2);
        let err = embed_sequence(&mut tape, item, pos, beh, &p).unwrap_err();
        match err {
            Error::Bounds { table, index, bound, .. } => {
                assert_eq!(table, "items");
                assert_eq!((index, bound), (5, 2));
            }
            e => panic!("expected bounds error, got {e}"),
        }
    }

    #[test]
    fn view_masks_partition_the_valid_slots() {
        let p = prepare_sequence(
            &[rec(0, 0, 0), rec(1, 2, 1), rec(2, 1, 2), rec(3, 2, 3)],
            6,
        );
        let views: Vec<Vec<f64>> = (0..3).map(|b| behavior_view_mask(&p.behaviors, &p.mask, b)).collect();
        for slot in 0..6 {
            let total: f64 = views.iter().map(|v| v[slot]).sum();
            assert_eq!(total, p.mask[slot], "views partition valid slots exactly");
        }
        // Sentinel behaviors (prompt rows) match no view.
        let sentinel = vec![usize::MAX; 2];
        let m = behavior_view_mask(&sentinel, &[1.0, 1.0], 0);
        assert_eq!(m, vec![0.0, 0.0]);
    }
}
