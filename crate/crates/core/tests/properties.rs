use std::collections::{BTreeSet, HashMap, VecDeque};

use matanet::dataio::{iterate_batches, Dataset, DatasetFile, ImageRecord, RoiAnnotation};
use matanet::model::{loss::cross_entropy, softmax_rows, EncoderConfig, Matanet, ModelConfig};
use matanet::roi_context::{augment, build_context_set, extract, square_roi_window, window_for, AugmentConfig, BBox, ContextScale, Image};
use matanet::taxonomy::{derive_hierarchical_label, hierarchical_distance, shuffle_levels, PredictionRecord, TaxonId, TaxonNode, TaxonomyTree};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Random rooted tree: node `i > 0` hangs under a uniformly chosen earlier node.
/// Ids are scrambled so they are neither dense nor ordered by rank.
fn tree_strategy() -> impl Strategy<Value = Vec<TaxonNode>> {
    (2usize..40)
        .prop_flat_map(|n| (Just(n), proptest::collection::vec(any::<prop::sample::Index>(), n - 1), any::<u64>()))
        .prop_map(|(n, picks, seed)| {
            let mut ids: Vec<i64> = (0..n as i64).map(|i| i * 7 + 1000).collect();
            ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut rank = vec![0usize; n];
            let mut out = vec![TaxonNode { id: TaxonId(ids[0]), name: "n0".into(), rank: 0, parent_id: None }];
            for i in 1..n {
                let p = picks[i - 1].index(i);
                rank[i] = rank[p] + 1;
                out.push(TaxonNode { id: TaxonId(ids[i]), name: format!("n{i}"), rank: rank[i], parent_id: Some(TaxonId(ids[p])) });
            }
            out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
            out
        })
}

fn bfs_distances(records: &[TaxonNode], from: TaxonId) -> HashMap<TaxonId, u32> {
    let mut adj: HashMap<TaxonId, Vec<TaxonId>> = HashMap::new();
    for r in records {
        if let Some(p) = r.parent_id {
            adj.entry(r.id).or_default().push(p);
            adj.entry(p).or_default().push(r.id);
        }
    }
    let mut dist = HashMap::from([(from, 0u32)]);
    let mut queue = VecDeque::from([from]);
    while let Some(u) = queue.pop_front() {
        for &v in adj.get(&u).into_iter().flatten() {
            if !dist.contains_key(&v) {
                dist.insert(v, dist[&u] + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn node_distance_is_a_tree_metric_matching_bfs(records in tree_strategy()) {
        let tree = TaxonomyTree::build(records.clone()).unwrap();
        let ids: Vec<TaxonId> = records.iter().map(|r| r.id).collect();
        let bfs: HashMap<TaxonId, HashMap<TaxonId, u32>> = ids.iter().map(|&a| (a, bfs_distances(&records, a))).collect();
        for &a in &ids {
            prop_assert_eq!(tree.node_distance(a, a).unwrap(), 0);
            for &b in &ids {
                let d = tree.node_distance(a, b).unwrap();
                prop_assert_eq!(d, bfs[&a][&b]);
                prop_assert_eq!(d, tree.node_distance(b, a).unwrap());
                prop_assert_eq!(d == 0, a == b);
            }
        }
        for &a in ids.iter().take(8) {
            for &b in ids.iter().take(8) {
                for &c in &ids {
                    prop_assert!(bfs[&a][&b] <= bfs[&a][&c] + bfs[&c][&b]);
                    prop_assert!(tree.node_distance(a, b).unwrap() <= tree.node_distance(a, c).unwrap() + tree.node_distance(c, b).unwrap());
                }
            }
        }
    }

    #[test]
    fn insertion_order_does_not_matter(records in tree_strategy(), seed in any::<u64>()) {
        let mut shuffled = records.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(TaxonomyTree::build(records).unwrap(), TaxonomyTree::build(shuffled).unwrap());
    }

    #[test]
    fn labels_list_every_ancestor_by_rank(records in tree_strategy()) {
        let tree = TaxonomyTree::build(records.clone()).unwrap();
        for r in &records {
            let label = derive_hierarchical_label(&tree, r.id).unwrap();
            prop_assert_eq!(label.terminal(), r.id);
            prop_assert_eq!(label.targets().len(), tree.depth());
            let mut chain = vec![r.id];
            chain.extend(tree.ancestors(r.id).unwrap());
            chain.reverse();
            for rank in 1..=tree.depth() {
                let t = label.at(rank).unwrap();
                if rank <= r.rank {
                    prop_assert_eq!(t.node, chain[rank]);
                    prop_assert!(!t.interpolated);
                    prop_assert!(tree.level(rank).unwrap().contains(&t.node));
                } else {
                    prop_assert_eq!(t.node, r.id);
                    prop_assert!(t.interpolated);
                }
            }
        }
    }

    #[test]
    fn level_shuffle_is_a_rank_preserving_bijection(records in tree_strategy(), seed in any::<u64>()) {
        let tree = TaxonomyTree::build(records.clone()).unwrap();
        let s = shuffle_levels(&tree, seed);
        let images: BTreeSet<TaxonId> = records.iter().map(|r| s.apply(r.id).unwrap()).collect();
        prop_assert_eq!(images.len(), records.len());
        let inv = s.inverse();
        for r in &records {
            let img = s.apply(r.id).unwrap();
            prop_assert_eq!(tree.rank(img).unwrap(), r.rank);
            prop_assert_eq!(inv.apply(img).unwrap(), r.id);
        }
    }

    #[test]
    fn hierarchical_distance_is_the_mean_path_and_order_free(records in tree_strategy(), picks in proptest::collection::vec((any::<prop::sample::Index>(), any::<prop::sample::Index>()), 1..30), seed in any::<u64>()) {
        let tree = TaxonomyTree::build(records.clone()).unwrap();
        let preds: Vec<PredictionRecord> = picks.iter().enumerate().map(|(i, (a, b))| PredictionRecord {
            annotation_id: i as i64,
            predicted: records[a.index(records.len())].id,
            truth: records[b.index(records.len())].id,
        }).collect();
        let hd = hierarchical_distance(&tree, &preds).unwrap();
        let oracle: f64 = preds.iter().map(|p| f64::from(bfs_distances(&records, p.truth)[&p.predicted])).sum::<f64>() / preds.len() as f64;
        prop_assert!((hd - oracle).abs() < 1e-12);
        let mut perm = preds.clone();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(hd, hierarchical_distance(&tree, &perm).unwrap());
        let exact: Vec<PredictionRecord> = preds.iter().map(|p| PredictionRecord { predicted: p.truth, ..*p }).collect();
        prop_assert_eq!(hierarchical_distance(&tree, &exact).unwrap(), 0.0);
    }

    #[test]
    fn context_windows_nest_and_share_the_center(x in 0.0f64..150.0, y in 0.0f64..150.0, w in 1.0f64..60.0, h in 1.0f64..60.0, iw in 40usize..400, ih in 40usize..400) {
        let roi = square_roi_window(&BBox::new(x, y, w, h)).unwrap();
        prop_assert_eq!(roi.side, w.max(h));
        let x3 = window_for(ContextScale::X3, &roi, iw, ih);
        let x5 = window_for(ContextScale::X5, &roi, iw, ih);
        let full = window_for(ContextScale::Full, &roi, iw, ih);
        prop_assert!(x3.contains(&roi) && x5.contains(&x3));
        prop_assert!((x3.side - 3.0 * roi.side).abs() < 1e-9 && (x5.side - 5.0 * roi.side).abs() < 1e-9);
        prop_assert_eq!(full.side, iw.max(ih) as f64);
        for win in [x3, x5, full] {
            prop_assert_eq!((win.cx, win.cy), (roi.cx, roi.cy));
        }
    }

    #[test]
    fn crops_have_the_requested_shape_and_unit_range(seed in any::<u64>(), x in 0.0f64..60.0, y in 0.0f64..60.0, w in 1.0f64..30.0, h in 1.0f64..30.0, side in 1usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::<f64>::from_fn(64, 48, |_, _, _| rand::Rng::gen::<f64>(&mut rng));
        let bbox = BBox::new(x, y.min(47.0), w, h);
        let cs = build_context_set(&img, &bbox, &ContextScale::ALL, side).unwrap();
        prop_assert_eq!(cs.scales(), ContextScale::ALL.to_vec());
        for s in cs.streams() {
            prop_assert_eq!((s.width(), s.height()), (side, side));
            prop_assert!(s.in_unit_range());
        }
        let aug = augment(&cs, &AugmentConfig::default(), seed, 3, 1);
        for (a, b) in aug.streams().zip(cs.streams()) {
            prop_assert_eq!((a.width(), a.height()), (b.width(), b.height()));
            prop_assert!(a.in_unit_range());
        }
        prop_assert_eq!(augment(&cs, &AugmentConfig::none(), seed, 3, 1), cs);
    }

    #[test]
    fn constant_images_crop_to_the_same_constant(v in 0.0f64..=1.0, cx in -10.0f64..70.0, side in 1.0f64..200.0) {
        let img = Image::filled(50, 60, [v, v, v]);
        let win = matanet::roi_context::CropWindow { cx, cy: 30.0, side };
        if let Ok(out) = extract(&img, &win, 9) {
            prop_assert!(out.data().iter().all(|&p| (p - v).abs() < 1e-12));
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut m = Array2::from_shape_vec((3, 4), vals).unwrap();
        softmax_rows(&mut m);
        for row in m.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot(vals in proptest::collection::vec(-20.0f64..20.0, 2..10), t in any::<prop::sample::Index>()) {
        let logits = Array1::from(vals);
        let target = t.index(logits.len());
        let (loss, grad) = cross_entropy(logits.view(), target).unwrap();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        prop_assert!((loss - (max + z.ln() - logits[target])).abs() < 1e-9);
        prop_assert!(grad.sum().abs() < 1e-12);
        for (k, g) in grad.iter().enumerate() {
            let p = (logits[k] - max).exp() / z;
            let onehot = if k == target { 1.0 } else { 0.0 };
            prop_assert!((g - (p - onehot)).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_cover_every_annotation_once(n in 1usize..60, bs in 1usize..17, seed in any::<u64>(), epoch in 0u64..5) {
        let dir = tempfile::tempdir().unwrap();
        Image::filled(8, 8, [0.5f64; 3]).save_png(&dir.path().join("a.png")).unwrap();
        let ids: Vec<i64> = (0..n as i64).map(|i| 3 * i + 11).collect();
        let file = DatasetFile {
            images: vec![ImageRecord { id: 1, file: "a.png".into(), width: 8, height: 8 }],
            annotations: ids.iter().map(|&id| RoiAnnotation { id, image_id: 1, bbox: BBox::new(1.0, 1.0, 2.0, 2.0), taxon_id: TaxonId(1) }).collect(),
            taxonomy: vec![
                TaxonNode { id: TaxonId(0), name: "r".into(), rank: 0, parent_id: None },
                TaxonNode { id: TaxonId(1), name: "a".into(), rank: 1, parent_id: Some(TaxonId(0)) },
            ],
            split: None,
        };
        let ds = Dataset::from_file(file, dir.path()).unwrap();
        let batches = iterate_batches(&ds, bs, seed, epoch).unwrap();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut flat: Vec<i64> = batches.concat();
        prop_assert_eq!(&batches, &iterate_batches(&ds, bs, seed, epoch).unwrap());
        flat.sort();
        prop_assert_eq!(flat, ids);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn forward_shapes_follow_the_config(classes in 2usize..7, levels in proptest::collection::vec(1usize..5, 0..3), heads in prop::sample::select(vec![1usize, 2, 4]), fused in prop::sample::select(vec![4usize, 8, 12]), n_scales in 0usize..=3, seed in any::<u64>()) {
        let scales = ContextScale::ALL[..n_scales].to_vec();
        let cfg = ModelConfig {
            encoder: EncoderConfig { image_side: 8, patch_size: 4, dim: 8, depth: 1, heads: 2, ..EncoderConfig::default() },
            scales: scales.clone(),
            fusion_blocks: 1,
            fusion_heads: heads,
            fused_dim: fused,
            num_classes: classes,
            level_sizes: levels.clone(),
            init_seed: seed,
        };
        let model = Matanet::<f32>::new(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = Image::<f32>::from_fn(20, 20, |_, _, _| rand::Rng::gen::<f32>(&mut rng));
        let cs = build_context_set(&img, &BBox::new(8.0, 8.0, 4.0, 4.0), &scales, 8).unwrap();
        let pred = model.forward(&cs).unwrap();
        prop_assert_eq!(pred.logits.len(), classes);
        prop_assert_eq!(pred.z.len(), fused);
        prop_assert_eq!(pred.attention.maps.len(), n_scales);
        for (s, w) in &pred.attention.maps {
            prop_assert!(scales.contains(s));
            prop_assert_eq!(w.dim(), (heads, 4));
            for row in w.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-5);
            }
        }
        prop_assert!(pred.logits.iter().chain(pred.z.iter()).all(|v| v.is_finite()));
    }
}
