//! Prompt assembly from an agent's ordered prompt plan.

use std::collections::BTreeMap;

use crate::agent::spec::{AgentSpec, PromptItem};
use crate::chat::ChatMessage;
use crate::ids::StageId;
use crate::model::stage::StageConfig;

pub const DEFAULT_PSEUDONYM_GUARD: &str = "Participants in this conversation use randomly assigned \
pseudonyms (for example animal, nature or numeric names). Ignore any meaning, theme or associations \
of these names: do not make puns, jokes or emoji about them, and refer to people only by the names \
as given.";

pub const SEQUENTIAL_READING_INSTRUCTION: &str = "The chat history is listed oldest first, one \
message per line as [timestamp] name: message. Read it in order and respond to the most recent \
messages, using earlier messages only as context.";

/// Data from an earlier stage that an agent has been granted.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StageContext {
    pub title: String,
    pub lines: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PromptError {
    #[error("no context available for stage '{0}'")]
    MissingStageContext(StageId),
}

fn profile_block(spec: &AgentSpec) -> String {
    let mut s = format!("You are {}.", spec.profile.display_name);
    if !spec.profile.avatar.is_empty() {
        s.push_str(&format!(" Your avatar is {}.", spec.profile.avatar));
    }
    if !spec.persona_prompt.is_empty() {
        s.push('\n');
        s.push_str(&spec.persona_prompt);
    }
    s
}

fn system_instructions(spec: &AgentSpec, stage: &StageConfig) -> String {
    let mut s = format!("You are taking part in the stage \"{}\" of a live group study.", stage.title);
    if !stage.markdown_body.is_empty() {
        s.push_str("\nStage description:\n");
        s.push_str(&stage.markdown_body);
    }
    s.push('\n');
    s.push_str(SEQUENTIAL_READING_INSTRUCTION);
    s.push_str("\nReply with a single JSON object containing these fields:");
    for f in spec.effective_schema() {
        s.push_str(&format!("\n- {} ({}): {}", f.field_name, f.field_type.name(), f.description));
    }
    s
}

pub fn render_history(transcript: &[ChatMessage]) -> String {
    let mut ordered: Vec<&ChatMessage> = transcript.iter().collect();
    // Stable, so equal timestamps keep transcript order.
    ordered.sort_by_key(|m| m.timestamp);
    let mut s = String::from("Chat history:");
    for m in ordered {
        s.push('\n');
        s.push_str(&m.history_line());
    }
    s
}

/// Concatenates the plan's sections in order, separated by blank lines.
pub fn assemble_prompt(
    spec: &AgentSpec,
    stage: &StageConfig,
    transcript: &[ChatMessage],
    context: &BTreeMap<StageId, StageContext>,
) -> Result<String, PromptError> {
    let mut sections = Vec::with_capacity(spec.prompt_plan.len());
    for item in &spec.prompt_plan {
        sections.push(match item {
            PromptItem::ProfileBlock => profile_block(spec),
            PromptItem::SystemInstructions => system_instructions(spec, stage),
            PromptItem::StageContextRef { stage_id } => {
                let ctx = context
                    .get(stage_id)
                    .ok_or_else(|| PromptError::MissingStageContext(stage_id.clone()))?;
                let mut s = format!("Context from stage \"{}\":", ctx.title);
                for line in &ctx.lines {
                    s.push('\n');
                    s.push_str(line);
                }
                s
            }
            PromptItem::ChatHistory => render_history(transcript),
            PromptItem::CustomText { text } => text.clone(),
            PromptItem::PseudonymGuard => DEFAULT_PSEUDONYM_GUARD.to_string(),
        });
    }
    Ok(sections.join("\n\n"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::AuthorKind;
    use crate::model::stage::{ChatStageParams, StageParams, StageUi};
    use crate::time::Timestamp;

    fn stage() -> StageConfig {
        StageConfig {
            id: "chat".into(),
            title: "Discussion".into(),
            markdown_body: String::new(),
            ui: StageUi::default(),
            params: StageParams::GroupChat(ChatStageParams::default()),
        }
    }

    fn msg(t: i64, who: &str, text: &str) -> ChatMessage {
        ChatMessage {
            id: format!("m{t}"),
            cohort_id: "c".into(),
            stage_id: "chat".into(),
            author_id: who.to_lowercase(),
            author_kind: AuthorKind::Participant,
            display_name: who.into(),
            text: text.into(),
            timestamp: Timestamp::from_secs(t),
        }
    }

    #[test]
    fn custom_text_precedes_history() {
        let mut spec = AgentSpec::simple_mediator("m", "Mod", "ensure politeness", "scripted");
        spec.prompt_plan = vec![
            PromptItem::ProfileBlock,
            PromptItem::CustomText { text: "ensure politeness".into() },
            PromptItem::ChatHistory,
        ];
        let transcript = vec![msg(3, "Anonymous Bear", "third"), msg(1, "Anonymous Owl", "first"), msg(2, "Anonymous Fox", "second")];
        let p = assemble_prompt(&spec, &stage(), &transcript, &BTreeMap::new()).unwrap();
        let custom = p.find("ensure politeness").unwrap();
        let lines: Vec<&str> = p.lines().filter(|l| l.starts_with('[')).collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].ends_with("Anonymous Owl: first"));
        assert!(lines[2].ends_with("Anonymous Bear: third"));
        assert!(p.find(lines[0]).unwrap() > custom);
    }

    #[test]
    fn empty_history_section_is_present() {
        let spec = AgentSpec::simple_mediator("m", "Mod", "x", "scripted");
        let p = assemble_prompt(&spec, &stage(), &[], &BTreeMap::new()).unwrap();
        assert!(p.ends_with("Chat history:"));
    }

    #[test]
    fn pseudonym_guard_is_verbatim() {
        let mut spec = AgentSpec::simple_mediator("m", "Mod", "x", "scripted");
        spec.prompt_plan.push(PromptItem::PseudonymGuard);
        let p = assemble_prompt(&spec, &stage(), &[msg(1, "Anonymous Bear", "hi")], &BTreeMap::new()).unwrap();
        assert!(p.contains(DEFAULT_PSEUDONYM_GUARD));
    }

    #[test]
    fn missing_context_names_stage() {
        let mut spec = AgentSpec::simple_mediator("m", "Mod", "x", "scripted");
        spec.prompt_plan.insert(0, PromptItem::StageContextRef { stage_id: "survey".into() });
        assert_eq!(
            assemble_prompt(&spec, &stage(), &[], &BTreeMap::new()).unwrap_err(),
            PromptError::MissingStageContext("survey".into())
        );
        let ctx = BTreeMap::from([(
            StageId::from("survey"),
            StageContext { title: "Survey".into(), lines: vec!["Anonymous Owl: q1 = a".into()] },
        )]);
        let p = assemble_prompt(&spec, &stage(), &[], &ctx).unwrap();
        assert!(p.starts_with("Context from stage \"Survey\":\nAnonymous Owl: q1 = a"));
    }
}
