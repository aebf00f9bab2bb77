"""Stage protocol: templates, prompt construction, response parsing.

A long task is decomposed into named stages, each stage is assigned a
compute budget (action horizon, denoising step count), and at run time a
classifier reports a ranked belief over stages.  All three exchanges are
plain text with a remote model, so every parser here is defensive:
responses are sanitized, values are clamped into range, and a missing
"hardest stage" designation is repaired by a deterministic fallback.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


class StageParseError(ValueError):
    """A response could not be coerced into the expected structure."""


DESCRIPTION_PREFIX = "Action features:"


def normalize_name(name: str) -> str:
    """Collapse whitespace runs to single underscores and strip ends."""
    return "_".join(str(name).split())


def _stage_names(stages) -> list[str]:
    """Accept StageTemplate sequences or plain name sequences."""
    return [normalize_name(getattr(s, "name", s)) for s in stages]


# -- domain types -------------------------------------------------------------


@dataclass(frozen=True)
class StageTemplate:
    name: str
    description: str

    def __post_init__(self):
        if not self.name:
            raise ValueError("stage name must be nonempty")
        if any(c.isspace() for c in self.name):
            raise ValueError(f"stage name {self.name!r} contains whitespace")
        if not self.description.startswith(DESCRIPTION_PREFIX):
            raise ValueError(
                f"description must begin {DESCRIPTION_PREFIX!r}")


@dataclass(frozen=True)
class ScheduleRanges:
    a_min: int = 8
    a_max: int = 16
    i_min: int = 20
    i_max: int = 40

    def __post_init__(self):
        for v in (self.a_min, self.a_max, self.i_min, self.i_max):
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError("range bounds must be positive integers")
        if self.a_min > self.a_max or self.i_min > self.i_max:
            raise ValueError("range bounds out of order")

    @property
    def degenerate(self) -> bool:
        """Single admissible pair, so entries cannot differ."""
        return self.a_min == self.a_max and self.i_min == self.i_max


@dataclass(frozen=True)
class ScheduleEntry:
    name: str
    n_action_steps: int
    num_inference_steps: int

    def __post_init__(self):
        for v in (self.n_action_steps, self.num_inference_steps):
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ValueError("schedule values must be positive integers")

    @property
    def pair(self) -> tuple[int, int]:
        return (self.n_action_steps, self.num_inference_steps)


@dataclass(frozen=True)
class ScheduleTable:
    entries: tuple[ScheduleEntry, ...]
    ranges: ScheduleRanges = ScheduleRanges()

    def __post_init__(self):
        if not self.entries:
            raise ValueError("schedule table is empty")
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("duplicate stage names in schedule table")
        r = self.ranges
        for e in self.entries:
            if not (r.a_min <= e.n_action_steps <= r.a_max):
                raise ValueError(f"{e.name}: horizon outside range")
            if not (r.i_min <= e.num_inference_steps <= r.i_max):
                raise ValueError(f"{e.name}: step count outside range")
        hardest = (r.a_min, r.i_max)
        if not any(e.pair == hardest for e in self.entries):
            raise ValueError("no entry carries the precision budget "
                             f"{hardest}")
        if len(self.entries) > 1 and not r.degenerate \
                and len({e.pair for e in self.entries}) == 1:
            raise ValueError("all schedule entries are identical")

    def entry_for(self, name: str) -> ScheduleEntry:
        name = normalize_name(name)
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(f"no schedule entry for stage {name!r}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.entries)


@dataclass(frozen=True)
class StageBelief:
    """Ranked (stage index, probability) pairs, highest first."""

    entries: tuple[tuple[int, float], ...]

    def __post_init__(self):
        if not self.entries:
            raise ValueError("belief is empty")
        probs = [p for _, p in self.entries]
        idxs = [i for i, _ in self.entries]
        if len(set(idxs)) != len(idxs) or min(idxs) < 0:
            raise ValueError("stage indices must be unique and nonnegative")
        if any(p < 0.0 or p > 1.0 for p in probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if any(a < b for a, b in zip(probs, probs[1:])):
            raise ValueError("probabilities must be nonincreasing")
        if sum(probs) > 1.0 + 1e-6:
            raise ValueError("probabilities sum above one")

    @property
    def top_stage(self) -> int:
        return self.entries[0][0]


# -- prompt construction ------------------------------------------------------

_DECOMPOSITION_TEMPLATE = """Task: {task_desc}

You are given {num_images} images showing the progression of the task. \
Decompose the task into exactly {num_stages} stages based on visual changes.
Each stage should describe the pixel-level visual change between states.
Naming rule: task/stage names should use underscores instead of spaces

Return exactly {num_stages} stages in JSON with schema:
[
  {{
    "name": "<stage_name>",
    "description": "Action features: <desc>"
  }}
]
"""

_SCHEDULE_TEMPLATE = """Task stages (total {num_stages}):
{stage_definitions}
Assign two parameters for each stage:
- n_action_steps: integer in [{a_min}, {a_max}]
- num_inference_steps: integer in [{i_min}, {i_max}]
Choose n_action_steps and num_inference_steps based on the relative \
difficulty of each stage.
Use smaller values for simple stages and larger values for more precise \
stages.
Do not assign the same values to all stages.

Return JSON for all stages:
[
  {{
    "name": "<stage_name>",
    "n_action_steps": <N_a>,
    "num_inference_steps": <N_d>
  }}
]
"""

_CLASSIFICATION_TEMPLATE = """Task: You are given several consecutive \
frames from a robotic manipulation task.
The images are ordered chronologically from earliest to most recent.

Analyze the visual progression and determine the current stage of the task.
Focus primarily on the most recent frame while considering the temporal \
evolution.

Stages:
{stage_definitions}

Return the top-{top_k} most likely stages ranked by probability.

Output format:

{format_lines}

Only output the stage names and probabilities without additional \
explanations.
"""


def format_stage_definitions(stages) -> str:
    """One "name: description" line per stage, template order."""
    lines = []
    for s in stages:
        name = normalize_name(getattr(s, "name", s))
        desc = getattr(s, "description", "")
        lines.append(f"{name}: {desc}" if desc else name)
    return "\n".join(lines)


def build_decomposition_prompt(task_desc: str, num_images: int,
                               num_stages: int) -> str:
    if not task_desc or not task_desc.strip():
        raise ValueError("task_desc must be nonempty")
    if num_images < 1:
        raise ValueError("num_images must be >= 1")
    if num_stages < 1:
        raise ValueError("num_stages must be >= 1")
    return _DECOMPOSITION_TEMPLATE.format(task_desc=task_desc,
                                          num_images=num_images,
                                          num_stages=num_stages)


def build_schedule_prompt(stages, ranges: ScheduleRanges | None = None) -> str:
    if not stages:
        raise ValueError("need at least one stage")
    r = ranges if ranges is not None else ScheduleRanges()
    return _SCHEDULE_TEMPLATE.format(
        num_stages=len(stages),
        stage_definitions=format_stage_definitions(stages),
        a_min=r.a_min, a_max=r.a_max, i_min=r.i_min, i_max=r.i_max)


def build_classification_prompt(stages, top_k: int = 3) -> str:
    if not stages:
        raise ValueError("need at least one stage")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    return _CLASSIFICATION_TEMPLATE.format(
        stage_definitions=format_stage_definitions(stages),
        top_k=top_k,
        format_lines="\n".join(["stage_name: probability"] * top_k))


# -- response sanitation ------------------------------------------------------


def _strip_code_fences(text: str) -> str:
    start = text.find("```")
    if start == -1:
        return text
    nl = text.find("\n", start)
    if nl == -1:
        return text[:start]
    end = text.find("```", nl + 1)
    if end == -1:
        return text[:start] + text[nl + 1:]
    return text[:start] + text[nl + 1:end] + text[end + 3:]


def _extract_array(text: str) -> str:
    """Span of the first balanced top-level [...] pair, string-aware."""
    start = text.find("[")
    while start != -1:
        depth, in_str, esc = 0, False, False
        for i in range(start, len(text)):
            c = text[i]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c in "[{":
                depth += 1
            elif c in "]}":
                depth -= 1
                if depth == 0:
                    if c == "]":
                        return text[start:i + 1]
                    break  # mismatched closer, try the next opener
        start = text.find("[", start + 1)
    raise StageParseError("no JSON array found in response")


def _drop_trailing_commas(text: str) -> str:
    out = []
    in_str, esc = False, False
    n = len(text)
    for i, c in enumerate(text):
        if in_str:
            out.append(c)
            if esc:
                esc = False
            elif c == "\\":
                esc = True
            elif c == '"':
                in_str = False
            continue
        if c == '"':
            in_str = True
            out.append(c)
            continue
        if c == ",":
            j = i + 1
            while j < n and text[j] in " \t\r\n":
                j += 1
            if j < n and text[j] in "]}":
                continue
        out.append(c)
    return "".join(out)


def sanitize_json(raw: str) -> str:
    """Recover the JSON array from a chatty response: drop code fences
    and surrounding prose, remove trailing commas before ] or }.

    Raises StageParseError when no bracketed array can be found."""
    return _drop_trailing_commas(_extract_array(_strip_code_fences(raw)))


def _load_array(text: str) -> list:
    try:
        data = json.loads(sanitize_json(text))
    except json.JSONDecodeError as e:
        raise StageParseError(f"response is not valid JSON: {e}") from e
    if not isinstance(data, list):
        raise StageParseError("response is not a JSON array")
    return data


# -- response parsing ---------------------------------------------------------


def parse_stage_templates(text: str, expected_n: int) -> list[StageTemplate]:
    """Parse a decomposition response into exactly expected_n templates.

    Names are whitespace-normalized to underscores; a description missing
    its standard prefix gets it prepended rather than rejected."""
    data = _load_array(text)
    out: list[StageTemplate] = []
    seen: set[str] = set()
    for item in data:
        if not isinstance(item, dict):
            raise StageParseError(f"stage entry is not an object: {item!r}")
        if "name" not in item or "description" not in item:
            raise StageParseError(f"stage entry missing fields: {item!r}")
        name = normalize_name(item["name"])
        if not name:
            raise StageParseError("empty stage name")
        if name in seen:
            raise StageParseError(f"duplicate stage name {name!r}")
        seen.add(name)
        desc = str(item["description"]).strip()
        if not desc.startswith(DESCRIPTION_PREFIX):
            desc = f"{DESCRIPTION_PREFIX} {desc}"
        out.append(StageTemplate(name=name, description=desc))
    if len(out) != expected_n:
        raise StageParseError(
            f"expected {expected_n} stages, got {len(out)}")
    return out


def _as_int(value) -> int:
    if isinstance(value, bool):
        raise StageParseError(f"boolean is not a count: {value!r}")
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        return int(round(value))
    if isinstance(value, str):
        try:
            return int(round(float(value.strip())))
        except ValueError:
            pass
    raise StageParseError(f"unparseable integer value: {value!r}")


def parse_schedule(text: str, stages,
                   ranges: ScheduleRanges | None = None) -> ScheduleTable:
    """Parse a schedule response into a validated table, template order.

    Values are clamped into the configured ranges.  If no stage carries
    the precision budget (a_min, i_max), the entry with the largest step
    count (ties: smallest horizon, then earliest stage) is promoted to
    it.  If that leaves every entry identical, the earliest stage is
    demoted to (a_max, i_min) so the table still differentiates stages.
    """
    r = ranges if ranges is not None else ScheduleRanges()
    names = _stage_names(stages)
    if not names:
        raise StageParseError("no stages given")
    data = _load_array(text)
    got: dict[str, tuple[int, int]] = {}
    for item in data:
        if not isinstance(item, dict):
            raise StageParseError(f"schedule entry is not an object: {item!r}")
        for key in ("name", "n_action_steps", "num_inference_steps"):
            if key not in item:
                raise StageParseError(f"schedule entry missing {key!r}")
        name = normalize_name(item["name"])
        if name not in names:
            raise StageParseError(f"unknown stage {name!r}")
        if name in got:
            raise StageParseError(f"duplicate schedule entry {name!r}")
        na = min(max(_as_int(item["n_action_steps"]), r.a_min), r.a_max)
        nd = min(max(_as_int(item["num_inference_steps"]), r.i_min), r.i_max)
        got[name] = (na, nd)
    missing = [n for n in names if n not in got]
    if missing:
        raise StageParseError(f"missing schedule entries: {missing}")
    pairs = [got[n] for n in names]
    hardest = (r.a_min, r.i_max)
    if hardest not in pairs:
        best = max(range(len(pairs)),
                   key=lambda i: (pairs[i][1], -pairs[i][0], -i))
        pairs[best] = hardest
    if len(pairs) > 1 and not r.degenerate and len(set(pairs)) == 1:
        pairs[0] = (r.a_max, r.i_min)
    entries = tuple(ScheduleEntry(name=n, n_action_steps=a,
                                  num_inference_steps=d)
                    for n, (a, d) in zip(names, pairs))
    return ScheduleTable(entries=entries, ranges=r)


def parse_stage_probs(text: str, stages, top_k: int = 3) -> StageBelief:
    """Parse "name: probability" lines into a ranked belief.

    Unknown names are dropped with a warning, probabilities clamped to
    [0, 1], the top_k kept in descending order, and the kept mass
    renormalized only when it exceeds one (absolute confidences are
    preserved otherwise)."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    names = _stage_names(stages)
    index = {n: i for i, n in enumerate(names)}
    seen: dict[str, float] = {}
    for line in text.splitlines():
        line = line.strip().lstrip("-*").strip()
        if not line or ":" not in line:
            continue
        name_part, _, val_part = line.partition(":")
        try:
            p = float(val_part.strip())
        except ValueError:
            continue
        name = normalize_name(name_part)
        if name not in index:
            log.warning("dropping unknown stage %r in belief", name)
            continue
        if name in seen:
            continue  # first occurrence wins
        seen[name] = min(max(p, 0.0), 1.0)
    if not seen:
        raise StageParseError("no recognized stages in response")
    ranked = sorted(seen.items(), key=lambda kv: -kv[1])[:top_k]
    total = sum(p for _, p in ranked)
    if total > 1.0:
        ranked = [(n, p / total) for n, p in ranked]
    return StageBelief(tuple((index[n], p) for n, p in ranked))


def select_stage(belief: StageBelief, gap: float,
                 rng: np.random.Generator) -> int:
    """Most probable stage when it leads by at least the gap, otherwise
    a draw among the ranked candidates proportional to probability."""
    entries = belief.entries
    if len(entries) == 1:
        return entries[0][0]
    if entries[0][1] - entries[1][1] >= gap:
        return entries[0][0]
    probs = np.array([p for _, p in entries], dtype=np.float64)
    total = probs.sum()
    if total <= 0.0:
        probs = np.full(len(entries), 1.0 / len(entries))
    else:
        probs = probs / total
    return entries[int(rng.choice(len(entries), p=probs))][0]


# -- file formats -------------------------------------------------------------


def templates_to_json(stages: list[StageTemplate]) -> str:
    data = [{"name": s.name, "description": s.description} for s in stages]
    return json.dumps(data, indent=4, ensure_ascii=False) + "\n"


def templates_from_json(text: str) -> list[StageTemplate]:
    data = _load_array(text)
    if not data:
        raise StageParseError("no stages in file")
    return parse_stage_templates(text, expected_n=len(data))


def schedule_to_json(table: ScheduleTable) -> str:
    data = [{"name": e.name, "n_action_steps": e.n_action_steps,
             "num_inference_steps": e.num_inference_steps}
            for e in table.entries]
    return json.dumps(data, indent=4, ensure_ascii=False) + "\n"


def schedule_from_json(text: str,
                       ranges: ScheduleRanges | None = None) -> ScheduleTable:
    """Load a schedule file; stage set and order are taken from the file
    itself, and the same repair rules as response parsing apply."""
    data = _load_array(text)
    names = []
    for item in data:
        if isinstance(item, dict) and "name" in item:
            names.append(normalize_name(item["name"]))
    if not names:
        raise StageParseError("no stages in schedule file")
    return parse_schedule(text, names, ranges)
