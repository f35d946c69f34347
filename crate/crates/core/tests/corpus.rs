use std::fs;

use itemforge_core::corpus::{batch_iter, build_corpus, CorpusError, CorpusManifest, TokenShard, ShardRole};
use itemforge_core::tokenizer::Vocabulary;
use proptest::prelude::*;

#[test]
fn two_byte_document_splits_by_ceiling_rule() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("doc.txt"), "ab").unwrap();
    let v = Vocabulary::byte_level();
    let built = build_corpus(dir.path(), &v, 0.5).unwrap();
    // stream = [a, b, eot]; ceil(3 * 0.5) = 2 validation tokens
    assert_eq!(built.manifest.total_tokens, 3);
    assert_eq!(built.train.ids, vec![b'a' as u32]);
    assert_eq!(built.validation.ids, vec![b'b' as u32, v.eot_id()]);
    assert_eq!(built.manifest.documents[0].tokens, 2);
    assert_eq!(built.manifest.documents[0].bytes, 2);
}

#[test]
fn empty_directory_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let err = build_corpus(dir.path(), &Vocabulary::byte_level(), 0.1).err().unwrap();
    assert!(matches!(err, CorpusError::CorpusEmpty));
}

#[test]
fn split_fraction_bounds() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a"), "text").unwrap();
    let v = Vocabulary::byte_level();
    assert!(matches!(build_corpus(dir.path(), &v, 0.0), Err(CorpusError::BadSplit(_))));
    assert!(matches!(build_corpus(dir.path(), &v, 0.51), Err(CorpusError::BadSplit(_))));
    assert!(build_corpus(dir.path(), &v, 0.5).is_ok());
}

#[test]
fn identical_files_identical_counts_and_sorted_order() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("sub")).unwrap();
    fs::write(dir.path().join("sub/b.txt"), "Chest pain.\r\n\r\n\r\n\r\n\r\nFever.").unwrap();
    fs::write(dir.path().join("a.txt"), "Chest pain.\r\n\r\n\r\n\r\n\r\nFever.").unwrap();
    let built = build_corpus(dir.path(), &Vocabulary::byte_level(), 0.2).unwrap();
    let docs = &built.manifest.documents;
    assert_eq!(docs.len(), 2);
    assert_eq!(docs[0].path, "a.txt");
    assert_eq!(docs[1].path, "sub/b.txt");
    assert_eq!(docs[0].tokens, docs[1].tokens);
    // cleaned to "Chest pain.\n\n\nFever." (20 bytes)
    assert_eq!(docs[0].tokens, 20);
    let sum: u64 = docs.iter().map(|d| d.tokens + 1).sum();
    assert_eq!(built.manifest.total_tokens, sum);
    assert_eq!(
        built.train.len() + built.validation.len(),
        built.manifest.total_tokens as usize
    );
}

#[test]
fn manifest_text_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("x.txt"), "one\ttab").unwrap();
    fs::write(dir.path().join("y.txt"), "two").unwrap();
    let built = build_corpus(dir.path(), &Vocabulary::byte_level(), 0.25).unwrap();
    let text = built.manifest.to_text();
    assert!(text.contains("x.txt\t7\t7\n"));
    assert_eq!(CorpusManifest::from_text(&text).unwrap(), built.manifest);
}

#[test]
fn shard_file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let shard = TokenShard::new((0..1000).collect(), ShardRole::Train);
    let path = dir.path().join("train.bin");
    shard.save(&path).unwrap();
    assert_eq!(fs::metadata(&path).unwrap().len(), 8 + 4000);
    assert_eq!(TokenShard::load(&path, ShardRole::Train).unwrap(), shard);
}

proptest! {
    #[test]
    fn batches_are_shifted_windows_and_reproducible(
        len in 10usize..200,
        context in 1usize..9,
        batch in 1usize..5,
        seed in any::<u64>(),
    ) {
        let ids: Vec<u32> = (0..len as u32).map(|i| i * 7 % 101).collect();
        let shard = TokenShard::new(ids.clone(), ShardRole::Train);
        let a: Vec<_> = batch_iter(&shard, context, batch, seed).unwrap().take(3).collect();
        let b: Vec<_> = batch_iter(&shard, context, batch, seed).unwrap().take(3).collect();
        prop_assert_eq!(&a, &b);
        for bt in &a {
            for row in 0..batch {
                let inp = &bt.inputs[row * context..(row + 1) * context];
                let tgt = &bt.targets[row * context..(row + 1) * context];
                prop_assert_eq!(&inp[1..], &tgt[..context - 1]);
                // locate the window and check the last target is the following token
                let start = ids.windows(context).position(|w| w == inp).unwrap();
                prop_assert_eq!(tgt[context - 1], ids[start + context]);
            }
        }
    }

    #[test]
    fn train_and_validation_are_disjoint_ranges(text in "[a-z ]{1,200}", split in 0.01f64..0.5) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("d.txt"), &text).unwrap();
        let built = build_corpus(dir.path(), &Vocabulary::byte_level(), split).unwrap();
        let total = built.manifest.total_tokens as usize;
        prop_assert_eq!(built.validation.len(), ((total as f64) * split).ceil() as usize);
        let mut joined = built.train.ids.clone();
        joined.extend(&built.validation.ids);
        let mut expected: Vec<u32> = text.bytes().map(u32::from).collect();
        expected.push(256);
        prop_assert_eq!(joined, expected);
    }
}
