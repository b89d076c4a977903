"""Question bank: educational objectives and difficulty-leveled multiple choice.

Loaded from two files in a ``questions/`` folder: ``lessons.xml`` (the
objectives) and ``questions.xml`` (the questions, each tied to a lesson
and a difficulty level, with exactly one correct choice).  Banks are
treated as immutable; every editing operation validates and returns a
new bank, leaving the original untouched on failure.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field, replace

from . import xmlio
from .xmlio import SchemaError


class UnknownId(Exception):
    pass


class DuplicateId(SchemaError):
    pass


class DanglingReference(SchemaError):
    pass


class NoQuestionsAtLevel(Exception):
    pass


class InvalidChoiceIndex(Exception):
    pass


@dataclass(frozen=True)
class EducationalObjective:
    eo_id: str
    title: str


@dataclass(frozen=True)
class Question:
    question_id: str
    eo_id: str
    level: int
    text: str
    choices: tuple[str, ...]
    correct_index: int
    image_path: str | None = None


@dataclass
class QuestionBank:
    objectives: list[EducationalObjective] = field(default_factory=list)
    questions: list[Question] = field(default_factory=list)
    rng_seed: int = 0

    def __post_init__(self):
        self._rng = random.Random(self.rng_seed)

    def objective_ids(self) -> set[str]:
        return {eo.eo_id for eo in self.objectives}

    def get_question(self, question_id: str) -> Question:
        for q in self.questions:
            if q.question_id == question_id:
                return q
        raise UnknownId(question_id)


def _check_question(q: Question, eo_ids: set[str]) -> None:
    if not q.question_id:
        raise SchemaError("empty question id")
    if q.eo_id not in eo_ids:
        raise DanglingReference(
            f"question {q.question_id!r} references unknown lesson {q.eo_id!r}"
        )
    if q.level < 1:
        raise SchemaError(f"question {q.question_id!r} has level {q.level}, minimum is 1")
    if not q.text:
        raise SchemaError(f"question {q.question_id!r} has no text")
    if len(q.choices) < 2:
        raise SchemaError(f"question {q.question_id!r} needs at least two choices")
    if not 0 <= q.correct_index < len(q.choices):
        raise SchemaError(
            f"question {q.question_id!r} correct index {q.correct_index} "
            f"out of range for {len(q.choices)} choices"
        )


def check_bank(objectives: list[EducationalObjective], questions: list[Question]) -> None:
    eo_ids: set[str] = set()
    for eo in objectives:
        if not eo.eo_id:
            raise SchemaError("empty lesson id")
        if eo.eo_id in eo_ids:
            raise DuplicateId(f"duplicate lesson id {eo.eo_id!r}")
        eo_ids.add(eo.eo_id)
    q_ids: set[str] = set()
    for q in questions:
        if q.question_id in q_ids:
            raise DuplicateId(f"duplicate question id {q.question_id!r}")
        q_ids.add(q.question_id)
        _check_question(q, eo_ids)


def load_bank(directory, rng_seed: int = 0) -> QuestionBank:
    lessons_root = xmlio.load_root(f"{directory}/lessons.xml", "lessons")
    xmlio.take_attrs(lessons_root, ())
    xmlio.check_no_text(lessons_root)
    xmlio.check_children(lessons_root, ("lesson",))
    objectives = []
    for elem in lessons_root:
        attrs = xmlio.take_attrs(elem, ("id", "title"))
        xmlio.check_no_text(elem)
        if len(elem):
            raise SchemaError("<lesson> has no children")
        objectives.append(EducationalObjective(attrs["id"], attrs["title"]))

    questions_root = xmlio.load_root(f"{directory}/questions.xml", "questions")
    xmlio.take_attrs(questions_root, ())
    xmlio.check_no_text(questions_root)
    xmlio.check_children(questions_root, ("question",))
    questions = [_parse_question(elem) for elem in questions_root]
    check_bank(objectives, questions)
    return QuestionBank(objectives, questions, rng_seed)


def _parse_question(elem) -> Question:
    attrs = xmlio.take_attrs(elem, ("id", "lesson", "level"))
    level = xmlio.parse_int(attrs["level"], "level")
    xmlio.check_no_text(elem)
    xmlio.check_children(elem, ("text", "image", "choice"))
    kids = list(elem)
    if not kids or kids[0].tag != "text":
        raise SchemaError(f"question {attrs['id']!r} must start with <text>")
    xmlio.take_attrs(kids[0], ())
    text = kids[0].text or ""
    rest = kids[1:]
    image_path = None
    if rest and rest[0].tag == "image":
        xmlio.take_attrs(rest[0], ())
        image_path = rest[0].text or ""
        rest = rest[1:]
    choices = []
    correct_index = None
    for child in rest:
        if child.tag != "choice":
            raise SchemaError(
                f"question {attrs['id']!r}: <{child.tag}> out of place"
            )
        cattrs = xmlio.take_attrs(child, ("correct",))
        if cattrs["correct"] not in ("true", "false"):
            raise SchemaError(
                f"question {attrs['id']!r}: correct must be 'true' or 'false'"
            )
        if cattrs["correct"] == "true":
            if correct_index is not None:
                raise SchemaError(
                    f"question {attrs['id']!r} has more than one correct choice"
                )
            correct_index = len(choices)
        choices.append(child.text or "")
    if correct_index is None:
        raise SchemaError(f"question {attrs['id']!r} has no correct choice")
    return Question(attrs["id"], attrs["lesson"], level, text,
                    tuple(choices), correct_index, image_path)


def save_bank(bank: QuestionBank, directory) -> None:
    """Write canonical lessons.xml and questions.xml (sorted, fixed layout)."""
    lessons = sorted(bank.objectives, key=lambda eo: eo.eo_id.encode())
    lines = ["<lessons>"] if lessons else []
    for eo in lessons:
        lines.append("  <lesson{}/>".format(
            xmlio.attr_str([("id", eo.eo_id), ("title", eo.title)])
        ))
    lines.append("</lessons>" if lessons else "<lessons/>")
    _write_file(f"{directory}/lessons.xml", lines)

    questions = sorted(bank.questions, key=lambda q: q.question_id.encode())
    lines = ["<questions>"] if questions else []
    for q in questions:
        lines.append("  <question{}>".format(xmlio.attr_str([
            ("id", q.question_id), ("lesson", q.eo_id), ("level", str(q.level)),
        ])))
        lines.append(f"    <text>{xmlio.esc_text(q.text)}</text>")
        if q.image_path is not None:
            lines.append(f"    <image>{xmlio.esc_text(q.image_path)}</image>")
        for i, choice in enumerate(q.choices):
            flag = "true" if i == q.correct_index else "false"
            body = xmlio.esc_text(choice)
            lines.append(f'    <choice correct="{flag}">{body}</choice>')
        lines.append("  </question>")
    lines.append("</questions>" if questions else "<questions/>")
    _write_file(f"{directory}/questions.xml", lines)


def _write_file(path, lines) -> None:
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))


def select_question(bank: QuestionBank, level: int,
                    exclude: frozenset[str] | set[str] = frozenset()) -> Question:
    """Uniform seeded draw over the level's questions, minus exclusions."""
    candidates = [q for q in bank.questions
                  if q.level == level and q.question_id not in exclude]
    if not candidates:
        raise NoQuestionsAtLevel(f"no questions at level {level}")
    return bank._rng.choice(candidates)


def check_answer(question: Question, choice_index: int) -> bool:
    if not 0 <= choice_index < len(question.choices):
        raise InvalidChoiceIndex(
            f"choice {choice_index} out of range for {len(question.choices)} choices"
        )
    return choice_index == question.correct_index


# -- editing (the tutor-facing CRUD surface) -----------------------------------

def add_eo(bank: QuestionBank, eo_id: str, title: str) -> QuestionBank:
    if eo_id in bank.objective_ids():
        raise DuplicateId(f"lesson {eo_id!r} already exists")
    objectives = bank.objectives + [EducationalObjective(eo_id, title)]
    check_bank(objectives, bank.questions)
    return QuestionBank(objectives, list(bank.questions), bank.rng_seed)


def edit_eo(bank: QuestionBank, eo_id: str, title: str) -> QuestionBank:
    if eo_id not in bank.objective_ids():
        raise UnknownId(eo_id)
    objectives = [replace(eo, title=title) if eo.eo_id == eo_id else eo
                  for eo in bank.objectives]
    return QuestionBank(objectives, list(bank.questions), bank.rng_seed)


def delete_eo(bank: QuestionBank, eo_id: str, cascade: bool = False) -> QuestionBank:
    if eo_id not in bank.objective_ids():
        raise UnknownId(eo_id)
    dependents = [q for q in bank.questions if q.eo_id == eo_id]
    if dependents and not cascade:
        raise DanglingReference(
            f"lesson {eo_id!r} still has {len(dependents)} question(s); "
            "delete them first or cascade explicitly"
        )
    objectives = [eo for eo in bank.objectives if eo.eo_id != eo_id]
    questions = [q for q in bank.questions if q.eo_id != eo_id]
    return QuestionBank(objectives, questions, bank.rng_seed)


def add_question(bank: QuestionBank, question: Question) -> QuestionBank:
    if any(q.question_id == question.question_id for q in bank.questions):
        raise DuplicateId(f"question {question.question_id!r} already exists")
    questions = bank.questions + [question]
    check_bank(bank.objectives, questions)
    return QuestionBank(list(bank.objectives), questions, bank.rng_seed)


def edit_question(bank: QuestionBank, question: Question) -> QuestionBank:
    if not any(q.question_id == question.question_id for q in bank.questions):
        raise UnknownId(question.question_id)
    questions = [question if q.question_id == question.question_id else q
                 for q in bank.questions]
    check_bank(bank.objectives, questions)
    return QuestionBank(list(bank.objectives), questions, bank.rng_seed)


def delete_question(bank: QuestionBank, question_id: str) -> QuestionBank:
    if not any(q.question_id == question_id for q in bank.questions):
        raise UnknownId(question_id)
    questions = [q for q in bank.questions if q.question_id != question_id]
    return QuestionBank(list(bank.objectives), questions, bank.rng_seed)


def qm_mutate(bank: QuestionBank, op: str, **kwargs) -> QuestionBank:
    """String-keyed dispatcher for the editing operations (CLI surface)."""
    ops = {
        "add-eo": add_eo,
        "edit-eo": edit_eo,
        "delete-eo": delete_eo,
        "add-q": add_question,
        "edit-q": edit_question,
        "delete-q": delete_question,
    }
    if op not in ops:
        raise ValueError(f"unknown question-manager operation {op!r}")
    return ops[op](bank, **kwargs)
