"""
Program templates over the slot/class fact interface.

Every template declares the external families `object` (one index) and
`class` (two indices), one objectness fact and one categorical class group per
slot. Slots are numbered 1..N and class index k stands for class value k.
"""

from typing import Callable, Dict, List

from errors import ConfigurationError


def fact_interface(n_slots: int, n_classes: int,
                   object_pred: str = "object", class_pred: str = "class",
                   prefix_args: str = "") -> List[str]:
    """Declarations binding the perception heads to facts for every slot."""
    lines = [":- external(object, 1).", ":- external(class, 2)."]
    for slot in range(1, n_slots + 1):
        lines.append(f"object/{slot}::{object_pred}({prefix_args}{slot}).")
        for k in range(n_classes):
            lines.append(
                f"@group(slot{slot}) class/{slot}/{k}::{class_pred}({prefix_args}{slot}, {k})."
            )
    return lines


def addition_program(n_slots: int, n_classes: int) -> str:
    """Sum of digit values; an absent slot counts as digit 0."""
    lines = [f"% Addition over {n_slots} slots, classes 0..{n_classes - 1}; absent slots add 0"]
    lines += fact_interface(n_slots, n_classes)
    lines.append("digit(ID, Val) :- object(ID), class(ID, Val).")
    lines.append("digit(ID, 0) :- \\+ object(ID).")
    calls = ", ".join(f"digit({i}, Y{i})" for i in range(1, n_slots + 1))
    total = " + ".join(f"Y{i}" for i in range(1, n_slots + 1))
    lines.append(f"add(Z) :- {calls}, Z is {total}.")
    lines.append("query(add(Z)).")
    return "\n".join(lines) + "\n"


def chain_addition_program(n_slots: int, n_classes: int) -> str:
    """Sum accumulated slot by slot; digits exist only for object slots."""
    lines = [f"% Chained addition over {n_slots} slots, classes 0..{n_classes - 1}"]
    lines += fact_interface(n_slots, n_classes, "isobj_tmp", "digit_tmp", "input, ")
    lines.append("digit(X, ID, Y) :- isobj_tmp(X, ID), digit_tmp(X, ID, Y).")
    lines.append(f"sum_from(ID, SumIn, SumIn) :- ID > {n_slots}.")
    lines.append(
        f"sum_from(ID, SumIn, SumOut) :- ID =< {n_slots}, digit(input, ID, C), "
        "S is SumIn + C, Next is ID + 1, sum_from(Next, S, SumOut)."
    )
    lines.append(
        f"sum_from(ID, SumIn, SumOut) :- ID =< {n_slots}, not(isobj_tmp(input, ID)), "
        "Next is ID + 1, sum_from(Next, SumIn, SumOut)."
    )
    lines.append("add(input, Z) :- sum_from(1, 0, Z).")
    lines.append("query(add(input, Z)).")
    return "\n".join(lines) + "\n"


def count_program(n_slots: int, n_classes: int) -> str:
    """Number of slots holding an object."""
    lines = [f"% Object count over {n_slots} slots"]
    lines += fact_interface(n_slots, n_classes)
    lines.append("present(ID, 1) :- object(ID).")
    lines.append("present(ID, 0) :- \\+ object(ID).")
    calls = ", ".join(f"present({i}, P{i})" for i in range(1, n_slots + 1))
    total = " + ".join(f"P{i}" for i in range(1, n_slots + 1))
    lines.append(f"count(Z) :- {calls}, Z is {total}.")
    lines.append("query(count(Z)).")
    return "\n".join(lines) + "\n"


def pair_program(n_slots: int, n_classes: int) -> str:
    """True when two distinct object slots share a class."""
    lines = [f"% Pair detection over {n_slots} slots, classes 0..{n_classes - 1}"]
    lines += fact_interface(n_slots, n_classes)
    lines.append("seen(ID, C) :- object(ID), class(ID, C).")
    lines.append("pair :- seen(I, C), seen(J, C), I < J.")
    lines.append("query(pair).")
    return "\n".join(lines) + "\n"


TEMPLATES: Dict[str, Callable[[int, int], str]] = {
    "addition": addition_program,
    "chain_addition": chain_addition_program,
    "count": count_program,
    "pair": pair_program,
}


def render_template(name: str, n_slots: int, n_classes: int) -> str:
    """Source text of template `name` at the given capacity and class count."""
    try:
        template = TEMPLATES[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown program template '{name}' (known: {', '.join(sorted(TEMPLATES))})"
        ) from None
    return template(n_slots, n_classes)
