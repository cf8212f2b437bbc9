#![allow(dead_code)]

use dome::corpus::{CodeCommentRecord, IntentCategory};
use dome::model::ModelConfig;
use dome::retriever::{RetrieverConfig, ScorerKind};
use dome::trainer::TrainConfig;

use IntentCategory::*;

const CODES: [&str; 8] = [
    "int total = 0;\nfor (int x : xs) total += x;\nreturn total;",
    "if (cache.containsKey(key)) return cache.get(key);\nValue v = load(key);\ncache.put(key, v);\nreturn v;",
    "String s = name.trim();\nreturn s.isEmpty() ? null : s;",
    "lock.lock();\ntry { count++; } finally { lock.unlock(); }",
    "File f = new File(path);\nif (!f.exists()) f.mkdirs();\nreturn f;",
    "byte[] buf = new byte[4096];\nint n;\nwhile ((n = in.read(buf)) > 0) out.write(buf, 0, n);",
    "List<String> out = new ArrayList<>();\nfor (String p : parts) out.add(p.toLowerCase());\nreturn out;",
    "long start = System.nanoTime();\ntask.run();\nreturn System.nanoTime() - start;",
];

/// (code index, intent, comment). Every code has two or three distinct
/// intent/comment pairs.
const PAIRS: [(usize, IntentCategory, &str); 20] = [
    (0, What, "sums all values in the list"),
    (0, HowItIsDone, "iterates once keeping a running total"),
    (1, What, "returns the cached value for a key"),
    (1, Why, "avoids reloading expensive values"),
    (1, HowToUse, "call with any key to get its value"),
    (2, What, "normalizes a name string"),
    (2, Property, "returns null for blank names"),
    (3, What, "increments the shared counter"),
    (3, Why, "the lock guards concurrent updates"),
    (4, What, "creates the directory if missing"),
    (4, HowToUse, "pass a path to get a ready file"),
    (4, Property, "never returns a missing directory"),
    (5, What, "copies the input stream to the output"),
    (5, HowItIsDone, "reads fixed size chunks until end"),
    (6, What, "lowercases every part"),
    (6, Property, "returns a new list each call"),
    (6, HowToUse, "pass the split parts of a path"),
    (7, What, "measures how long a task takes"),
    (7, Why, "nano time is monotonic unlike wall time"),
    (7, HowItIsDone, "subtracts start time from end time"),
];

/// 32 records over 8 code snippets; the first 12 pairs repeat once so every
/// code appears four times.
pub fn one_to_many_corpus() -> Vec<CodeCommentRecord> {
    PAIRS
        .iter()
        .chain(PAIRS.iter().take(12))
        .enumerate()
        .map(|(i, &(c, intent, comment))| CodeCommentRecord {
            id: i as u64,
            code: CODES[c].to_string(),
            comment: comment.to_string(),
            intent,
        })
        .collect()
}

pub fn overfit_config() -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        epochs: 300,
        lr: 1e-3,
        seed: 7,
        scorer: ScorerKind::Dense,
        clip_norm: 1.0,
        model: ModelConfig {
            d_model: 64,
            d_intent: 32,
            heads: 4,
            blocks: 2,
            ffn_mult: 2,
            dropout: 0.0,
            k_token: 10,
            k_statement: 5,
            max_comment_len: 12,
            max_statements: 8,
            max_statement_len: 16,
            code_vocab_size: 500,
            comment_vocab_size: 500,
            beam_size: 5,
            statement_values: false,
        },
        retriever: RetrieverConfig { d_r: 32, heads: 4, blocks: 1, epochs: 5, batch_size: 8, lr: 1e-3, ..RetrieverConfig::default() },
        checkpoint: None,
    }
}

/// A small config for quick end-to-end runs.
pub fn toy_config() -> TrainConfig {
    let mut cfg = overfit_config();
    cfg.epochs = 2;
    cfg.model.d_model = 16;
    cfg.model.d_intent = 8;
    cfg.model.heads = 2;
    cfg.model.blocks = 1;
    cfg.model.dropout = 0.1;
    cfg.retriever = RetrieverConfig { d_r: 16, heads: 2, blocks: 1, epochs: 1, batch_size: 8, lr: 1e-3, ..RetrieverConfig::default() };
    cfg
}
