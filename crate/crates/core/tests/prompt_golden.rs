use proptest::prelude::*;
use smmini_core::corpus::{normalize, parse_record, QARecord};
use smmini_core::promptkit::{
    detokenize, pack_example, render_parts, render_prompt, tokenize, ANSWER_CUE, BOS, EOS, QUESTION_PREFIX,
};

const RECORDS: &str = include_str!("fixtures/prompt_records.jsonl");
const GOLDEN: &str = include_str!("fixtures/golden_prompts.txt");

fn fixture_records() -> Vec<QARecord> {
    RECORDS
        .lines()
        .map(|l| normalize(parse_record(l, "fixture").unwrap()).unwrap())
        .collect()
}

#[test]
fn fixtures_render_to_golden_prompts() {
    let records = fixture_records();
    let golden: Vec<&str> = GOLDEN.lines().collect();
    assert_eq!(records.len(), 20);
    assert_eq!(golden.len(), records.len());
    for (rec, want) in records.iter().zip(golden) {
        assert_eq!(render_prompt(rec).full_text, want);
    }
}

#[test]
fn golden_covers_edge_cases() {
    let records = fixture_records();
    assert!(records.iter().any(|r| r.context.is_empty()));
    assert!(records.iter().any(|r| r.context.is_empty() && r.question.ends_with('?')));
    assert!(records.iter().any(|r| !r.context.is_empty() && r.question.ends_with('?')));
    assert!(records.iter().any(|r| !r.question.ends_with(['.', '?', '!'])));
    assert!(!GOLDEN.contains("?."));
}

#[test]
fn rendered_structure() {
    for rec in fixture_records() {
        let ex = render_prompt(&rec);
        assert!(ex.full_text.starts_with(QUESTION_PREFIX));
        assert!(ex.prompt_text.ends_with(ANSWER_CUE));
        assert_eq!(ex.answer(), rec.answer);
        assert!(0 < ex.answer_start && ex.answer_start < ex.full_text.chars().count());
        let chars: String = ex.full_text.chars().skip(ex.answer_start).collect();
        assert_eq!(chars, rec.answer);
    }
}

#[test]
fn pack_fixture_records() {
    for rec in fixture_records() {
        let ex = render_prompt(&rec);
        let seq = pack_example(&ex, 1024, true).unwrap();
        assert_eq!(seq.len(), ex.full_text.len() + 2);
        assert_eq!((seq.tokens.ids[0], *seq.tokens.ids.last().unwrap()), (BOS, EOS));
        let start = 1 + ex.answer_byte_start();
        let masked: Vec<usize> = (0..seq.len()).filter(|&i| seq.loss_mask[i]).collect();
        assert_eq!(masked, (start..seq.len()).collect::<Vec<_>>());
        assert_eq!(detokenize(&seq.tokens.ids).unwrap(), ex.full_text);
    }
}

proptest! {
    #[test]
    fn tokenizer_roundtrip(s in any::<String>()) {
        let ids = tokenize(&s);
        prop_assert!(ids.ids.iter().all(|&id| id < 256));
        prop_assert_eq!(detokenize(&ids.ids).unwrap(), s);
    }

    #[test]
    fn answer_only_mask_is_within_answer(
        ctx in "[a-z ]{0,30}",
        q in "[A-Za-z]{1,20}[.?!]?",
        a in "[a-z]{1,40}",
        max_len in 8usize..120,
    ) {
        let ex = render_parts(ctx.trim(), &q, &a);
        let start = 1 + ex.answer_byte_start();
        match pack_example(&ex, max_len, true) {
            Ok(seq) => {
                prop_assert_eq!(seq.tokens.len(), seq.loss_mask.len());
                prop_assert!(seq.len() <= max_len);
                for (i, &m) in seq.loss_mask.iter().enumerate() {
                    if m {
                        prop_assert!(i >= start);
                    }
                }
                prop_assert!(seq.loss_mask.iter().any(|&m| m));
            }
            Err(_) => prop_assert!(start >= max_len),
        }
        if let Ok(seq) = pack_example(&ex, max_len, false) {
            prop_assert_eq!(seq.loss_mask.iter().filter(|&&m| m).count(), seq.len() - 1);
        }
    }

    #[test]
    fn render_is_pure(ctx in "[ -~]{0,40}", q in "[ -~]{1,40}", a in "[ -~]{1,40}") {
        prop_assert_eq!(render_parts(&ctx, &q, &a), render_parts(&ctx, &q, &a));
        prop_assert_eq!(render_parts(&ctx, &q, &a).full_text.matches(ANSWER_CUE).count() >= 1, true);
    }
}
