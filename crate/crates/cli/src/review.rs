//! Line-oriented review loop.
//!
//! ```text
//! add <case_id> <input-json> <expected-json> [rationale]
//! rm <case_id>
//! mod <case_id> <patch-json>
//! say <free text>
//! show | help | approve | quit
//! ```
//!
//! Each feedback line is applied at once as its own round.

use std::io::{BufRead, Write};

use pieceforge_core::review::{CasePatch, FeedbackItem, ReviewSession};
use pieceforge_core::service::{Service, ServiceError};
use pieceforge_core::TestCase;
use serde_json::{json, Value};

use crate::{CmdResult, Failure, Outcome};

const HELP: &str = "commands:
  add <case_id> <input-json> <expected-json> [rationale]
  rm <case_id>
  mod <case_id> <patch-json>     patch keys: name, input, expected, comparison, rationale
  say <text>                     free-text feedback, the backend revises the suite
  show                           print the suite again
  approve                        approve the suite and leave
  quit                           leave without approving";

pub fn render(session: &ReviewSession) -> String {
    let suite = &session.current_suite;
    let mut out = format!(
        "{} suite v{} ({:?}), round {}\n",
        session.piece_id,
        suite.suite_version(),
        suite.state(),
        session.round
    );
    let width = suite.cases().iter().map(|c| c.case_id.len()).max().unwrap_or(0).max(4);
    out.push_str(&format!("  {:<width$}  input => expected\n", "case"));
    for case in suite.cases() {
        out.push_str(&format!("  {:<width$}  {} => {}\n", case.case_id, case.input, case.expected));
        if let Some(e) = session.current_explanation.get(&case.case_id) {
            out.push_str(&format!("  {:<width$}    {}\n", "", e.reasoning));
        }
    }
    let notes = session.current_explanation.coverage_notes.trim();
    if !notes.is_empty() {
        out.push_str(&format!("coverage: {notes}\n"));
    }
    out
}

/// Splits off leading JSON values, returning them with the rest of the line.
fn json_values(text: &str, n: usize) -> Result<(Vec<Value>, &str), String> {
    let mut stream = serde_json::Deserializer::from_str(text).into_iter::<Value>();
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        match stream.next() {
            Some(Ok(v)) => values.push(v),
            Some(Err(e)) => return Err(e.to_string()),
            None => return Err(format!("expected {n} JSON values")),
        }
    }
    let offset = stream.byte_offset();
    Ok((values, text[offset..].trim()))
}

enum Command {
    Feedback(FeedbackItem),
    Show,
    Help,
    Approve,
    Quit,
}

fn parse(line: &str) -> Result<Option<Command>, String> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (word, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
    let rest = rest.trim();
    let id_and_rest = || -> Result<(&str, &str), String> {
        let (id, tail) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
        if id.is_empty() {
            return Err(format!("{word}: missing case_id"));
        }
        Ok((id, tail.trim()))
    };
    let cmd = match word {
        "add" => {
            let (id, tail) = id_and_rest()?;
            let (values, rationale) = json_values(tail, 2).map_err(|e| format!("add: {e}"))?;
            let [input, expected]: [Value; 2] = values.try_into().expect("two values");
            let mut case = TestCase::new(id, input, expected);
            case.rationale = rationale.to_string();
            Command::Feedback(FeedbackItem::AddCase { case })
        }
        "rm" => {
            let (id, _) = id_and_rest()?;
            Command::Feedback(FeedbackItem::RemoveCase { case_id: id.into() })
        }
        "mod" => {
            let (id, tail) = id_and_rest()?;
            let patch: CasePatch = serde_json::from_str(tail).map_err(|e| format!("mod: {e}"))?;
            Command::Feedback(FeedbackItem::ModifyCase { case_id: id.into(), case: patch })
        }
        "say" if !rest.is_empty() => Command::Feedback(FeedbackItem::FreeText { text: rest.into() }),
        "say" => return Err("say: nothing to say".into()),
        "show" => Command::Show,
        "help" | "?" => Command::Help,
        "approve" => Command::Approve,
        "quit" | "exit" => Command::Quit,
        other => return Err(format!("unknown command {other:?}; try help")),
    };
    Ok(Some(cmd))
}

/// Reads commands from stdin until approve, quit or end of input.
pub fn interactive(svc: &Service, piece: &str, expert: &str, json_mode: bool) -> CmdResult {
    let mut session = match svc.review(piece) {
        Ok(s) => s,
        Err(ServiceError::NotFound(_)) => svc.start_review(piece)?,
        Err(e) => return Err(e.into()),
    };
    // in json mode stdout carries only the final document
    let mut screen: Box<dyn Write> = if json_mode { Box::new(std::io::stderr()) } else { Box::new(std::io::stdout()) };
    let _ = write!(screen, "{}", render(&session));
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        let _ = write!(screen, "> ");
        let _ = screen.flush();
        let Some(line) = lines.next() else { break };
        let line = line.map_err(|e| Failure::environment(format!("stdin: {e}")))?;
        let cmd = match parse(&line) {
            Ok(Some(cmd)) => cmd,
            Ok(None) => continue,
            Err(e) => {
                let _ = writeln!(screen, "{e}");
                continue;
            }
        };
        match cmd {
            Command::Feedback(item) => match svc.feedback(piece, vec![item], expert) {
                Ok(next) => {
                    session = next;
                    let _ = write!(screen, "{}", render(&session));
                }
                Err(e @ (ServiceError::Backend(_) | ServiceError::Invalid(_) | ServiceError::NotFound(_))) => {
                    let _ = writeln!(screen, "not applied: {e}");
                }
                Err(e) => return Err(e.into()),
            },
            Command::Show => {
                let _ = write!(screen, "{}", render(&session));
            }
            Command::Help => {
                let _ = writeln!(screen, "{HELP}");
            }
            Command::Approve => {
                let suite = svc.approve(piece, expert)?;
                let human = format!("{piece}: suite v{} approved by {expert}", suite.suite_version());
                return Ok(Outcome::ok(json!({"approved": true, "suite": suite}), human));
            }
            Command::Quit => break,
        }
    }
    let _ = writeln!(screen);
    let human = format!("{piece}: review left open at suite v{}", session.current_suite.suite_version());
    Ok(Outcome::ok(json!({"approved": false, "session": session}), human))
}
