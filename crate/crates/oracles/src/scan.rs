//! Recursive-descent interpreter for the navigation command language.
//!
//! Deliberately structured as a token-stream parser so it shares nothing
//! with the generator, which builds commands and their actions
//! compositionally during enumeration.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unparsable(pub String);

const PRIMS: [(&str, &str); 4] = [("walk", "W"), ("run", "R"), ("jump", "J"), ("look", "L")];
const DIRS: [(&str, &str); 2] = [("left", "TL"), ("right", "TR")];

fn prim_action(tok: &str) -> Option<&'static str> {
    PRIMS.iter().find(|(t, _)| *t == tok).map(|(_, a)| *a)
}

fn dir_action(tok: &str) -> Option<&'static str> {
    DIRS.iter().find(|(t, _)| *t == tok).map(|(_, a)| *a)
}

struct Parser<'a> {
    toks: &'a [String],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&str> {
        self.toks.get(self.pos).map(|s| s.as_str())
    }

    fn bump(&mut self) -> Option<&str> {
        let t = self.toks.get(self.pos).map(|s| s.as_str());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    // phrase := PRIM | PRIM DIR | PRIM ("opposite"|"around") DIR
    fn phrase(&mut self) -> Result<Vec<String>, Unparsable> {
        let head = self
            .bump()
            .ok_or_else(|| Unparsable("empty phrase".into()))?;
        let act = prim_action(head)
            .ok_or_else(|| Unparsable(format!("expected primitive, got {head:?}")))?;
        match self.peek() {
            Some("left") | Some("right") => {
                let d = dir_action(self.bump().unwrap()).unwrap();
                Ok(vec![d.to_string(), act.to_string()])
            }
            Some("opposite") => {
                self.bump();
                let d = self.expect_dir()?;
                Ok(vec![d.to_string(), d.to_string(), act.to_string()])
            }
            Some("around") => {
                self.bump();
                let d = self.expect_dir()?;
                let mut out = Vec::with_capacity(8);
                for _ in 0..4 {
                    out.push(d.to_string());
                    out.push(act.to_string());
                }
                Ok(out)
            }
            _ => Ok(vec![act.to_string()]),
        }
    }

    fn expect_dir(&mut self) -> Result<&'static str, Unparsable> {
        match self.bump() {
            Some(t) => {
                dir_action(t).ok_or_else(|| Unparsable(format!("expected direction, got {t:?}")))
            }
            None => Err(Unparsable("expected direction, got end".into())),
        }
    }

    // clause := phrase ("twice"|"thrice")?
    fn clause(&mut self) -> Result<Vec<String>, Unparsable> {
        let base = self.phrase()?;
        let reps = match self.peek() {
            Some("twice") => {
                self.bump();
                2
            }
            Some("thrice") => {
                self.bump();
                3
            }
            _ => 1,
        };
        let mut out = Vec::with_capacity(base.len() * reps);
        for _ in 0..reps {
            out.extend(base.iter().cloned());
        }
        Ok(out)
    }
}

/// Interprets a full command, producing abbreviated action tokens
/// (TL/TR/W/R/J/L). Fails on anything that does not parse exactly.
pub fn oracle_scan_interpret(tokens: &[String]) -> Result<Vec<String>, Unparsable> {
    let mut p = Parser { toks: tokens, pos: 0 };
    let first = p.clause()?;
    let out = match p.peek() {
        Some("and") => {
            p.bump();
            let second = p.clause()?;
            let mut o = first;
            o.extend(second);
            o
        }
        Some("after") => {
            p.bump();
            let second = p.clause()?;
            let mut o = second;
            o.extend(first);
            o
        }
        _ => first,
    };
    if p.pos != tokens.len() {
        return Err(Unparsable(format!(
            "trailing tokens at {}: {:?}",
            p.pos,
            &tokens[p.pos..]
        )));
    }
    Ok(out)
}
