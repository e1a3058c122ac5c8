# ALIVE Prompt I/O Module
# Renders the constructor, solver and reviewer prompts from editable templates
# Parses the tag-structured outputs each role must emit

import math
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple, Union

ROLES = ('constructor', 'solver', 'reviewer')

# Placeholders each role's template must declare (and may only declare)
ROLE_PLACEHOLDERS: Dict[str, Tuple[str, ...]] = {
    'constructor': ('RAW_DOCUMENT',),
    'solver': ('CONSTRUCTED_TASK',),
    'reviewer': ('CONSTRUCTED_TASK', 'SOLVER_OUTPUT', 'HIDDEN_TRUTH'),
}

PLACEHOLDER_PATTERN = re.compile(r'\{\{([A-Za-z0-9_]+)\}\}')


class TemplateError(KeyError):
    """A template or its bindings do not match the role's placeholder set."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else 'template error'


class TagParseError(ValueError):
    """A role output is missing a required section; ``tag`` names it."""

    def __init__(self, tag: str, reason: str = 'missing'):
        super().__init__(f"{tag}: {reason}")
        self.tag = tag
        self.reason = reason


@dataclass(frozen=True)
class TagSpec:
    """Ordered output sections a role must emit."""

    role: str
    required_tags: Tuple[str, ...]


TAG_SPECS: Dict[str, TagSpec] = {
    'constructor': TagSpec('constructor', ('Thought', 'Task', 'Hidden_Truth')),
    'solver': TagSpec('solver', ('Reasoning', 'Answer')),
    'reviewer': TagSpec('reviewer', ('Analysis', 'Critique', 'Score')),
}
KNOWN_TAGS = frozenset(tag for spec in TAG_SPECS.values() for tag in spec.required_tags)


@dataclass(frozen=True)
class PromptTemplate:
    """A role prompt body with ``{{NAME}}`` placeholders."""

    role: str
    body: str

    def placeholders(self) -> Tuple[str, ...]:
        """Placeholder names in order of first appearance."""
        seen = []
        for name in PLACEHOLDER_PATTERN.findall(self.body):
            if name not in seen:
                seen.append(name)
        return tuple(seen)

    def check(self) -> None:
        """Raise TemplateError unless the body declares exactly the role's placeholders."""
        if self.role not in ROLE_PLACEHOLDERS:
            raise TemplateError(f"unknown role {self.role!r}")
        declared = set(self.placeholders())
        unknown = sorted(declared - set(ROLE_PLACEHOLDERS[self.role]))
        if unknown:
            raise TemplateError(f"unknown placeholder {{{{{unknown[0]}}}}} in {self.role} template")
        absent = [name for name in ROLE_PLACEHOLDERS[self.role] if name not in declared]
        if absent:
            raise TemplateError(f"{self.role} template lacks {{{{{absent[0]}}}}}")

    def render(self, bindings: Mapping[str, str]) -> str:
        """
        Substitute every placeholder in one pass.

        Args:
            bindings (Mapping[str, str]): Placeholder name to text.

        Returns:
            str: Rendered prompt; bound text is inserted literally, never re-expanded.
        """
        self.check()
        for name in self.placeholders():
            if name not in bindings:
                raise TemplateError(f"{name} missing")
        return PLACEHOLDER_PATTERN.sub(lambda m: str(bindings[m.group(1)]), self.body)


def load_templates(directory: Optional[Union[str, Path]] = None) -> Dict[str, PromptTemplate]:
    """
    Load the three role templates.

    Args:
        directory (Optional[Union[str, Path]]): Directory holding ``constructor.txt``,
            ``solver.txt`` and ``reviewer.txt``; the packaged defaults when None.

    Returns:
        Dict[str, PromptTemplate]: Templates keyed by role.
    """
    templates = {}
    for role in ROLES:
        filename = f"{role}.txt"
        if directory is None:
            body = resources.files('alive').joinpath('templates', filename).read_text(encoding='utf-8')
        else:
            body = (Path(directory) / filename).read_text(encoding='utf-8')
        template = PromptTemplate(role, body)
        template.check()
        templates[role] = template
    return templates


_DEFAULT_TEMPLATES: Optional[Dict[str, PromptTemplate]] = None


def default_templates() -> Dict[str, PromptTemplate]:
    global _DEFAULT_TEMPLATES
    if _DEFAULT_TEMPLATES is None:
        _DEFAULT_TEMPLATES = load_templates()
    return _DEFAULT_TEMPLATES


def render(role: str, bindings: Mapping[str, str],
           templates: Optional[Mapping[str, PromptTemplate]] = None) -> str:
    """Render ``role``'s prompt with ``bindings`` (packaged templates by default)."""
    templates = templates or default_templates()
    if role not in templates:
        raise TemplateError(f"unknown role {role!r}")
    return templates[role].render(bindings)


def extract_section(text: str, tag: str) -> Optional[str]:
    """
    Return the trimmed content of the first complete ``<tag>...</tag>`` pair.

    When an opening delimiter repeats before the first closing one, the innermost
    opening wins, so the result never contains ``<tag>`` itself.

    Args:
        text (str): Model output.
        tag (str): Known tag name (case-sensitive).

    Returns:
        Optional[str]: Section text, or None when either delimiter is missing.
    """
    if tag not in KNOWN_TAGS:
        raise ValueError(f"Unknown tag: {tag}")
    opening, closing = f"<{tag}>", f"</{tag}>"
    start = text.find(opening)
    if start < 0:
        return None
    end = text.find(closing, start + len(opening))
    if end < 0:
        return None
    start = text.rfind(opening, start, end)
    return text[start + len(opening):end].strip()


def format_sections(sections: Iterable[Tuple[str, str]]) -> str:
    """Lay values out in the tag format the parsers read."""
    return '\n'.join(f"<{tag}>\n{value}\n</{tag}>" for tag, value in sections)


@dataclass(frozen=True)
class ParsedTask:
    thought: str
    query: str
    hidden_truth: str
    valid: bool
    leaked: bool


@dataclass(frozen=True)
class ParsedSolution:
    reasoning: str
    answer: str


@dataclass(frozen=True)
class ParsedReview:
    analysis: str
    critique: str
    soft_score: float
    clamped: bool


def _require(text: str, tag: str, allow_empty: bool = False) -> str:
    section = extract_section(text, tag)
    if section is None:
        raise TagParseError(tag, 'missing')
    if not allow_empty and not section:
        raise TagParseError(tag, 'empty')
    return section


def parse_constructor(text: str, check_leak: bool = True) -> ParsedTask:
    """
    Parse a constructor output into (thought, query, hidden truth).

    A task whose query contains the hidden truth verbatim parses but is invalid.

    Args:
        text (str): Constructor completion.
        check_leak (bool): Apply the verbatim-leak check.

    Returns:
        ParsedTask: Parsed fields and validity.
    """
    thought = _require(text, 'Thought', allow_empty=True)
    query = _require(text, 'Task')
    hidden_truth = _require(text, 'Hidden_Truth')
    leaked = check_leak and hidden_truth in query
    return ParsedTask(thought=thought, query=query, hidden_truth=hidden_truth,
                      valid=not leaked, leaked=leaked)


def parse_solver(text: str) -> ParsedSolution:
    """Parse a solver output into (reasoning, answer); the answer may span lines."""
    reasoning = _require(text, 'Reasoning', allow_empty=True)
    answer = _require(text, 'Answer', allow_empty=True)
    return ParsedSolution(reasoning=reasoning, answer=answer)


def parse_score(raw: str) -> Tuple[float, bool]:
    """
    Parse a reviewer score, clamping near-range values into [0, 1].

    Returns:
        Tuple[float, bool]: Score and whether it was clamped.
    """
    try:
        value = float(raw)
    except ValueError:
        raise TagParseError('Score', 'non-numeric') from None
    if not math.isfinite(value):
        raise TagParseError('Score', 'non-numeric')
    if 0.0 <= value <= 1.0:
        return value, False
    if 1.0 < value <= 2.0:
        return 1.0, True
    if -1.0 <= value < 0.0:
        return 0.0, True
    raise TagParseError('Score', 'out of range')


def parse_reviewer(text: str) -> ParsedReview:
    """Parse a reviewer output into (analysis, critique, soft score)."""
    analysis = _require(text, 'Analysis', allow_empty=True)
    critique = _require(text, 'Critique')
    score, clamped = parse_score(_require(text, 'Score'))
    return ParsedReview(analysis=analysis, critique=critique, soft_score=score, clamped=clamped)
