//! Record review: score medical-history entities against radiology-report
//! segments with a cosine correlation matrix and drop anything below the
//! similarity threshold, so unrelated history cannot steer the diagnosis.

use serde::{Deserialize, Serialize};

use crate::model_backends::{cosine, embed_text, BackendError, EmbedBackend};

/// Default correlation threshold; retention is inclusive at the boundary.
pub const DEFAULT_THRESHOLD: f64 = 0.1;

/// How an entity's row of correlations collapses to one importance score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// Highest correlation against any report segment.
    #[default]
    Max,
    /// Mean correlation over all report segments.
    Mean,
}

/// A span of the medical history treated as one medical fact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub text: String,
    pub position: usize,
}

/// Split text on sentence terminators (. ! ? ;) and newlines, trimming
/// whitespace and dropping empty spans.
pub fn segment(text: &str) -> Vec<Entity> {
    let mut spans = Vec::new();
    let mut start = 0;
    let flush = |from: usize, to: usize, spans: &mut Vec<Entity>| {
        let raw = &text[from..to];
        let trimmed = raw.trim();
        if !trimmed.is_empty() {
            let offset = from + (raw.len() - raw.trim_start().len());
            spans.push(Entity { text: trimmed.to_string(), position: offset });
        }
    };
    for (idx, ch) in text.char_indices() {
        if matches!(ch, '.' | '!' | '?' | ';' | '\n') {
            flush(start, idx, &mut spans);
            start = idx + ch.len_utf8();
        }
    }
    flush(start, text.len(), &mut spans);
    spans
}

/// Extract entities from a history: sentence segments, plus any lexicon
/// terms found in the text when a lexicon is supplied.
pub fn extract_entities(history: &str, lexicon: Option<&[String]>) -> Vec<Entity> {
    let mut entities = segment(history);
    if let Some(terms) = lexicon {
        let lowered = history.to_lowercase();
        for term in terms {
            let needle = term.trim().to_lowercase();
            if needle.is_empty() {
                continue;
            }
            let mut from = 0;
            while let Some(pos) = lowered[from..].find(&needle) {
                let position = from + pos;
                entities.push(Entity {
                    text: history[position..position + needle.len()].to_string(),
                    position,
                });
                from = position + needle.len();
            }
        }
        entities.sort_by(|a, b| a.position.cmp(&b.position).then(b.text.len().cmp(&a.text.len())));
        entities.dedup();
    }
    entities
}

/// Entity-by-segment cosine correlations; rows follow entity order, columns
/// follow report-segment order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub entities: Vec<Entity>,
    pub segments: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

/// Embed every entity and report segment and fill the correlation matrix.
/// When `include_overall` is set, the whole report is appended as one extra
/// column.
pub fn build_correlation_matrix(
    entities: &[Entity],
    report_segments: &[String],
    embed_backend: &dyn EmbedBackend,
    include_overall: Option<&str>,
) -> Result<CorrelationMatrix, BackendError> {
    let mut segments = report_segments.to_vec();
    if let Some(report) = include_overall {
        segments.push(report.to_string());
    }
    let seg_vecs = segments
        .iter()
        .map(|s| embed_text(embed_backend, s))
        .collect::<Result<Vec<_>, _>>()?;
    let mut values = Vec::with_capacity(entities.len());
    for entity in entities {
        let ev = embed_text(embed_backend, &entity.text)?;
        let row = seg_vecs
            .iter()
            .map(|sv| cosine(&ev, sv))
            .collect::<Result<Vec<_>, _>>()?;
        values.push(row);
    }
    Ok(CorrelationMatrix { entities: entities.to_vec(), segments, values })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewResult {
    pub retained: Vec<Entity>,
    pub dropped: Vec<(Entity, f64)>,
    /// Importance score per entity, in entity order.
    pub scores: Vec<f64>,
    /// Retained entity texts joined by ". " in original order; empty when
    /// nothing survives, in which case downstream prompts omit the history.
    pub filtered_history: String,
    pub threshold: f64,
}

/// Collapse each row to an importance score and retain entities scoring at
/// or above the threshold (inclusive).
pub fn score_and_filter(
    matrix: &CorrelationMatrix,
    threshold: f64,
    mode: ScoreMode,
) -> ReviewResult {
    let mut retained = Vec::new();
    let mut dropped = Vec::new();
    let mut scores = Vec::with_capacity(matrix.entities.len());
    for (entity, row) in matrix.entities.iter().zip(&matrix.values) {
        // An entity with no report segments to compare against scores 0.
        let score = if row.is_empty() {
            0.0
        } else {
            match mode {
                ScoreMode::Max => row.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
                ScoreMode::Mean => row.iter().sum::<f64>() / row.len() as f64,
            }
        };
        scores.push(score);
        if score >= threshold {
            retained.push(entity.clone());
        } else {
            dropped.push((entity.clone(), score));
        }
    }
    let filtered_history =
        retained.iter().map(|e| e.text.as_str()).collect::<Vec<_>>().join(". ");
    ReviewResult { retained, dropped, scores, filtered_history, threshold }
}

/// Review configuration; defaults mirror the documented constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewConfig {
    pub enabled: bool,
    pub threshold: f64,
    pub score: ScoreMode,
    pub lexicon: Option<std::path::PathBuf>,
    /// Append the whole report as one extra matrix column.
    pub include_overall_column: bool,
}

impl Default for ReviewConfig {
    fn default() -> Self {
        ReviewConfig {
            enabled: true,
            threshold: DEFAULT_THRESHOLD,
            score: ScoreMode::Max,
            lexicon: None,
            include_overall_column: false,
        }
    }
}

/// Full review pass: segment both sides, build the matrix, filter.
pub fn review_history(
    history: &str,
    report: &str,
    embed_backend: &dyn EmbedBackend,
    config: &ReviewConfig,
    lexicon_terms: Option<&[String]>,
) -> Result<ReviewResult, BackendError> {
    let entities = extract_entities(history, lexicon_terms);
    let report_segments: Vec<String> = segment(report).into_iter().map(|e| e.text).collect();
    let overall = config.include_overall_column.then_some(report);
    let matrix = build_correlation_matrix(&entities, &report_segments, embed_backend, overall)?;
    Ok(score_and_filter(&matrix, config.threshold, config.score))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_backends::HashEmbedBackend;

    fn matrix_from(values: Vec<Vec<f64>>, n_segments: usize) -> CorrelationMatrix {
        let entities = (0..values.len())
            .map(|i| Entity { text: format!("e{i}"), position: i * 10 })
            .collect();
        let segments = (0..n_segments).map(|j| format!("s{j}")).collect();
        CorrelationMatrix { entities, segments, values }
    }

    #[test]
    fn segment_splits_on_terminators() {
        let spans = segment("HTN. Afib; on warfarin");
        let texts: Vec<&str> = spans.iter().map(|e| e.text.as_str()).collect();
        assert_eq!(texts, vec!["HTN", "Afib", "on warfarin"]);
        assert_eq!(spans[0].position, 0);
        assert_eq!(spans[1].position, 5);
    }

    #[test]
    fn segment_empty_input() {
        assert!(segment("").is_empty());
        assert!(segment(" . ; \n").is_empty());
    }

    #[test]
    fn segment_single_sentence() {
        let spans = segment("one sentence");
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].text, "one sentence");
    }

    #[test]
    fn matrix_identity_cell_is_one() {
        let backend = HashEmbedBackend::default();
        let entities = vec![Entity { text: "pulmonary nodules".into(), position: 0 }];
        let segments = vec!["pulmonary nodules".to_string()];
        let m = build_correlation_matrix(&entities, &segments, &backend, None).unwrap();
        assert_eq!(m.values[0][0], 1.0);
    }

    #[test]
    fn matrix_zero_embedding_row_is_zero() {
        let backend = HashEmbedBackend::default();
        let entities = vec![Entity { text: "###".into(), position: 0 }];
        let segments = vec!["normal heart size".to_string(), "no effusion".to_string()];
        let m = build_correlation_matrix(&entities, &segments, &backend, None).unwrap();
        assert_eq!(m.values[0], vec![0.0, 0.0]);
    }

    #[test]
    fn matrix_shape() {
        let backend = HashEmbedBackend::default();
        let entities = vec![
            Entity { text: "HTN".into(), position: 0 },
            Entity { text: "HLD".into(), position: 5 },
        ];
        let segments = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        let m = build_correlation_matrix(&entities, &segments, &backend, None).unwrap();
        assert_eq!(m.values.len(), 2);
        assert!(m.values.iter().all(|row| row.len() == 3));
    }

    #[test]
    fn filter_drops_below_threshold() {
        let m = matrix_from(vec![vec![0.09, 0.05]], 2);
        let result = score_and_filter(&m, 0.1, ScoreMode::Max);
        assert!(result.retained.is_empty());
        assert_eq!(result.dropped.len(), 1);
        assert_eq!(result.filtered_history, "");
    }

    #[test]
    fn filter_is_inclusive_at_threshold() {
        let m = matrix_from(vec![vec![0.1, 0.0]], 2);
        let result = score_and_filter(&m, 0.1, ScoreMode::Max);
        assert_eq!(result.retained.len(), 1);
    }

    #[test]
    fn filter_threshold_zero_keeps_nonnegative() {
        let m = matrix_from(vec![vec![0.0, 0.0], vec![0.3, 0.1]], 2);
        let result = score_and_filter(&m, 0.0, ScoreMode::Max);
        assert_eq!(result.retained.len(), 2);
    }

    #[test]
    fn relevant_history_survives_hash_mock() {
        // Score computed with the hash-mock itself; the shared tokens must
        // push the correlation over the default threshold.
        let backend = HashEmbedBackend::default();
        let history = "pulmonary nodules noted previously. broken toe in 2003";
        let report = "Lungs: multiple pulmonary nodules are again demonstrated. Heart size normal.";
        let result =
            review_history(history, report, &backend, &ReviewConfig::default(), None).unwrap();
        let texts: Vec<&str> = result.retained.iter().map(|e| e.text.as_str()).collect();
        assert!(texts.contains(&"pulmonary nodules noted previously"));
        assert!(result.scores[0] >= DEFAULT_THRESHOLD);
    }

    #[test]
    fn monotonic_in_threshold() {
        let m = matrix_from(vec![vec![0.05], vec![0.15], vec![0.25], vec![0.35]], 1);
        let mut last = usize::MAX;
        for threshold in [0.0, 0.1, 0.2, 0.3, 0.4] {
            let n = score_and_filter(&m, threshold, ScoreMode::Max).retained.len();
            assert!(n <= last);
            last = n;
        }
    }

    #[test]
    fn segment_permutation_leaves_scores_unchanged() {
        let backend = HashEmbedBackend::default();
        let entities = extract_entities("HTN. pulmonary nodules. gout", None);
        let segments: Vec<String> = ["nodules in lung", "no acute fracture", "heart normal"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut reversed = segments.clone();
        reversed.reverse();
        let a = build_correlation_matrix(&entities, &segments, &backend, None).unwrap();
        let b = build_correlation_matrix(&entities, &reversed, &backend, None).unwrap();
        let sa = score_and_filter(&a, 0.1, ScoreMode::Max).scores;
        let sb = score_and_filter(&b, 0.1, ScoreMode::Max).scores;
        assert_eq!(sa, sb);
    }

    #[test]
    fn extreme_thresholds() {
        let m = matrix_from(vec![vec![-0.5], vec![0.0], vec![0.9]], 1);
        assert_eq!(score_and_filter(&m, -1.0, ScoreMode::Max).retained.len(), 3);
        assert_eq!(score_and_filter(&m, 1.000001, ScoreMode::Max).retained.len(), 0);
    }

    #[test]
    fn filtered_history_is_subsequence() {
        let m = matrix_from(vec![vec![0.3], vec![0.05], vec![0.2]], 1);
        let result = score_and_filter(&m, 0.1, ScoreMode::Max);
        assert_eq!(result.filtered_history, "e0. e2");
        let positions: Vec<usize> = result.retained.iter().map(|e| e.position).collect();
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        assert_eq!(positions, sorted);
    }

    #[test]
    fn lexicon_terms_become_entities() {
        let lexicon = vec!["pulmonary nodules".to_string()];
        let entities = extract_entities("history of pulmonary nodules and gout", Some(&lexicon));
        assert!(entities.iter().any(|e| e.text == "pulmonary nodules"));
        // sentence span is still present
        assert!(entities.iter().any(|e| e.text.contains("history of")));
    }

    #[test]
    fn mean_mode_averages_row() {
        let m = matrix_from(vec![vec![0.4, 0.0]], 2);
        let result = score_and_filter(&m, 0.1, ScoreMode::Mean);
        assert!((result.scores[0] - 0.2).abs() < 1e-12);
    }
}
