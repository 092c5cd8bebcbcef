mod common;

use ids_core::llm::PromptMode;
use ids_core::TaskKind;

use common::{golden_path, render_golden};

const MODES: [PromptMode; 2] = [PromptMode::ZeroShotCot, PromptMode::IclWithCot];

/// Set `UPDATE_GOLDENS=1` to rewrite the files after an intended prompt change.
#[test]
fn prompts_match_goldens() {
    let update = std::env::var_os("UPDATE_GOLDENS").is_some();
    for task in TaskKind::ALL {
        for mode in MODES {
            let rendered = render_golden(task, mode);
            let path = golden_path(task, mode);
            if update {
                std::fs::write(&path, &rendered).unwrap();
            }
            let expected = std::fs::read_to_string(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            assert_eq!(rendered, expected, "{}", path.display());
        }
    }
}

#[test]
fn zero_shot_prompts_have_trigger_and_no_test_header() {
    for task in TaskKind::ALL {
        let text = render_golden(task, PromptMode::ZeroShotCot);
        assert!(text.ends_with("Let's think step by step."), "{task}");
        assert!(!text.contains("Here is the test data."), "{task}");
        assert!(!text.contains("Examples:"), "{task}");
    }
}
