use super::FcdError;

/// Default system-level instruction.
pub const SYSTEM_TEMPLATE: &str =
    "You describe one pedestrian. Report only attributes that are clearly visible.";

/// Default object-level template; fixes the slot-delimited output grammar.
pub const OBJECT_TEMPLATE: &str =
    "Answer as: Head: ... | Upper: ... | Lower: ... | Accessories: ... Use commas between phrases.";

/// Generator input: system template, projected image tokens, object template.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSequence {
    system: String,
    image_tokens: Vec<u32>,
    object: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSegment<'a> {
    System(&'a str),
    ImageTokens(&'a [u32]),
    Object(&'a str),
}

impl PromptSequence {
    /// Always three segments, in order.
    pub fn segments(&self) -> [PromptSegment<'_>; 3] {
        [
            PromptSegment::System(&self.system),
            PromptSegment::ImageTokens(&self.image_tokens),
            PromptSegment::Object(&self.object),
        ]
    }

    pub fn system(&self) -> &str {
        &self.system
    }

    pub fn image_tokens(&self) -> &[u32] {
        &self.image_tokens
    }

    pub fn object(&self) -> &str {
        &self.object
    }
}

pub fn assemble_prompt(t_sys: &str, x_tok: &[u32], t_obj: &str) -> Result<PromptSequence, FcdError> {
    if t_sys.trim().is_empty() {
        return Err(FcdError::Validation("empty system template".into()));
    }
    if t_obj.trim().is_empty() {
        return Err(FcdError::Validation("empty object template".into()));
    }
    Ok(PromptSequence {
        system: t_sys.to_owned(),
        image_tokens: x_tok.to_vec(),
        object: t_obj.to_owned(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_in_order() {
        let p = assemble_prompt("SYS", &[1, 2], "OBJ").unwrap();
        assert_eq!(
            p.segments(),
            [
                PromptSegment::System("SYS"),
                PromptSegment::ImageTokens(&[1, 2]),
                PromptSegment::Object("OBJ"),
            ]
        );
    }

    #[test]
    fn empty_tokens_allowed_empty_templates_rejected() {
        let p = assemble_prompt("SYS", &[], "OBJ").unwrap();
        assert_eq!(p.segments()[1], PromptSegment::ImageTokens(&[]));
        assert!(matches!(assemble_prompt("", &[1], "OBJ"), Err(FcdError::Validation(_))));
        assert!(matches!(assemble_prompt("SYS", &[1], " "), Err(FcdError::Validation(_))));
    }
}
