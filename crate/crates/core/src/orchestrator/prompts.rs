//! Prompt text. Everything here ends up in request digests, so wording
//! changes invalidate recorded transcripts.

use crate::patcher::IcsrStage;

pub const SUMMARY_SYSTEM: &str = "\
You condense bug reports for an automated repair agent.
Reply with exactly these lines:
SUMMARY: <two or three sentences: the faulty behaviour, where it shows up, what correct behaviour is>
SIGNATURE: <a short string the failing reproduction's error output will contain, or leave this line out>";

pub const AGENT_SYSTEM: &str = "\
You are a careful software repair agent working inside a git checkout.
You fix the reported bug with the smallest possible change, one code region per iteration.
Every reply ends with exactly one fenced block labelled action that holds a JSON object:
```action
{\"thought\": \"<your reasoning>\", \"action\": \"<action name>\", \"args\": {\"<name>\": \"<value>\"}}
```
Only the actions listed in the latest message are available. Argument values are strings.";

pub fn summary_pin(summary: &str) -> String {
    format!("Problem summary (keep this in mind at every step):\n{summary}")
}

pub fn reproduction_request(statement: &str, version: u32, max_versions: u32, feedback: Option<&str>) -> String {
    let mut text = format!(
        "Write a standalone reproduction test for the bug (attempt {version} of {max_versions}).\n\
         The test must FAIL on the current code because of the bug and PASS once it is fixed.\n\
         It runs from the repository root; exit non-zero and print the failure to stderr when the bug is present.\n\n\
         Original problem statement:\n{statement}\n"
    );
    if let Some(feedback) = feedback {
        text.push_str(&format!("\nFeedback on the previous test:\n{feedback}\n"));
    }
    text.push_str(&format!("\n{}", actions_help(&["write_test", "give_up"])));
    text
}

pub fn refinement_request(feedback: &str, version: u32) -> String {
    format!(
        "The reproduction test appears to be invalid, so it cannot judge the patch.\n\
         Write an improved test (version {version}). It must fail on the original code and pass once the bug is fixed.\n\n\
         Diagnostic report:\n{feedback}\n\n{}",
        actions_help(&["write_test", "give_up"])
    )
}

pub fn action_help(action: &str) -> &'static str {
    match action {
        "set_keywords" => "set_keywords {\"keywords\": \"kw1, kw2, ...\"}: keywords to search the project tree with",
        "search" => "search {\"limit\": \"<optional max files>\"}: match the keywords against file paths and contents",
        "open_outline" => "open_outline {\"path\": \"<file>\"}: list the classes and functions of a file with line spans",
        "view_region" => {
            "view_region {\"path\": \"<file>\", \"symbol\": \"<qualified name>\"} or {\"path\": \"<file>\", \"start\": \"<n>\", \"end\": \"<m>\"}: show numbered source lines (a different path resets pending edits)"
        }
        "switch_file" => "switch_file {\"path\": \"<file>\"}: focus another file; discards pending edits",
        "edit_region" => {
            "edit_region {\"start\": \"<n>\", \"end\": \"<m>\", \"replacement\": \"<new text for lines n..m>\", \"rationale\": \"<why>\"}: replace one contiguous span of the active file"
        }
        "rollback" => "rollback {\"stage\": \"<earlier stage>\", \"reason\": \"<what went wrong>\"}: return to an earlier stage",
        "reset_patch" => "reset_patch {\"reason\": \"<why>\"}: discard every modification made so far and start from the original code",
        "done" => "done {\"reason\": \"<why>\"}: stop; you cannot find or fix the bug",
        "write_test" => {
            "write_test {\"source\": \"<python source>\", \"command\": \"<optional command line>\"}: save and run the reproduction test"
        }
        "give_up" => "give_up {\"reason\": \"<why>\"}: stop trying to reproduce the bug",
        _ => "",
    }
}

pub fn actions_help(actions: &[&str]) -> String {
    let mut text = String::from("Available actions:\n");
    for a in actions {
        text.push_str("- ");
        text.push_str(action_help(a));
        text.push('\n');
    }
    text
}

pub fn stage_instruction(stage: IcsrStage) -> &'static str {
    match stage {
        IcsrStage::Keywords => {
            "Stage keywords: choose keywords from the problem and the directory structure to find the relevant files."
        }
        IcsrStage::FileSearch => "Stage file_search: search the project tree with the current keywords.",
        IcsrStage::Outline => "Stage outline: pick the most relevant file and open its outline.",
        IcsrStage::Localize => "Stage localize: inspect the class or function that most likely holds the bug.",
        IcsrStage::Edit => "Stage edit: make one minimal edit to the active file, or inspect more lines first.",
    }
}

pub fn pass_intro(iteration: u32, overview: &str, feedback: Option<&str>) -> String {
    let mut text = format!("Repair iteration {iteration}.\n");
    if let Some(feedback) = feedback {
        text.push_str(&format!("\nResult of the previous iteration:\n{feedback}\n"));
    }
    text.push_str(&format!("\nProject structure:\n{overview}\n"));
    text
}

pub fn judge_request(excerpt: &str, patch: &str) -> String {
    format!(
        "A reproduction test failed without the expected failure signature.\n\
         Decide whether the failure shows the bug is still present or the test itself is invalid.\n\
         Reply with a line `VERDICT: BUG` or `VERDICT: INVALID`.\n\n\
         Test output:\n{excerpt}\n\nCurrent patch:\n{patch}\n"
    )
}
