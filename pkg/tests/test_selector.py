import copy
import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kndsim import selector
from kndsim.selector import (
    AttributeRef,
    Compare,
    Fault,
    KindIs,
    Literal,
    Logic,
    Not,
    SelectorSyntaxError,
    evaluate,
    parse,
)
from kndsim.topology import DeviceDescriptor, DeviceKind, build_preset_node
from strategies import asts, flag_asts

NODE = build_preset_node("A4HighGpu8g", "node-a")
RDMA0 = NODE.device("rdma0")
GPU0 = NODE.device("gpu0")


def test_parse_rdma_selector():
    assert parse('device.attributes["rdma"] == true') == Compare("==", AttributeRef("rdma"), Literal(True))


def test_and_binds_tighter_than_or():
    a, b, c = (Compare("==", AttributeRef(k), Literal(v)) for k, v in (("a", 1), ("b", 2), ("c", 3)))
    assert parse("a == 1 || b == 2 && c == 3") == Logic("||", a, Logic("&&", b, c))
    assert parse("a == 1 && b == 2 || c == 3") == Logic("||", Logic("&&", a, b), c)


def test_logic_is_left_associative():
    ast = parse("a == 1 || b == 1 || c == 1")
    assert isinstance(ast, Logic) and isinstance(ast.lhs, Logic)


def test_kind_and_not():
    assert parse('!device.kind == "Gpu"') == Not(KindIs(DeviceKind.GPU))
    assert parse('!!(device.kind == "Nic")') == Not(Not(KindIs(DeviceKind.NIC)))


def test_literal_variants_are_distinct():
    assert Literal(True) != Literal(1)
    assert Literal(0) != Literal(False)
    assert parse("x == 1") != parse("x == true")


def test_negative_int_and_whitespace():
    assert parse('  device.attributes[ "numaNode" ]>=-5') == Compare(">=", AttributeRef("numaNode"), Literal(-5))


def test_string_escapes_round_trip():
    ast = Compare("==", AttributeRef('we"ird\\key'), Literal('a"b'))
    assert parse(selector.format(ast)) == ast


def test_unclosed_bracket():
    text = 'device.attributes["x" =='
    with pytest.raises(SelectorSyntaxError) as err:
        parse(text)
    assert err.value.offset == text.index("[")
    assert "unclosed '['" in str(err.value)


@pytest.mark.parametrize("text, offset", [
    ("(a == 1", 0),
    ("a == 1)", 6),
    ("a == 1 && (b == 2 || (c == 3)", 10),
])
def test_unbalanced_parentheses(text, offset):
    with pytest.raises(SelectorSyntaxError) as err:
        parse(text)
    assert err.value.offset == offset


@pytest.mark.parametrize("text, offset", [
    ("a == 1 @ b", 7),
    ("a = 1", 2),
    ("", 0),
    ("a ==", 4),
    ("a == 1 &&", 9),
    ('device.kind == "Tpu"', 15),
    ("device.kind == 3", 15),
    ("device.attributes[x] == 1", 18),
    ('device.attributes[""] == 1', 18),
    ('"open == 1', 0),
    ("a == 99999999999999999999", 5),
    ("a == 1 b == 2", 7),
])
def test_syntax_errors_carry_offset(text, offset):
    with pytest.raises(SelectorSyntaxError) as err:
        parse(text)
    assert err.value.offset == offset


def test_evaluate_rdma_true():
    out = evaluate(parse('device.attributes["rdma"] == true'), RDMA0)
    assert out.ok and out.value is True


def test_evaluate_missing_attribute():
    for dev in NODE.devices:
        out = evaluate(parse('device.attributes["nosuch"] == 1'), dev)
        assert out.fault is Fault.ATTRIBUTE_MISSING and out.detail == "nosuch"


def test_evaluate_ordering_on_text():
    out = evaluate(parse('device.attributes["pciRoot"] < 3'), GPU0)
    assert out.fault is Fault.TYPE_MISMATCH and out.detail == "<"


def test_ordering_requires_integers_even_for_same_variant():
    out = evaluate(parse('device.attributes["pciRoot"] < "zzz"'), GPU0)
    assert out.fault is Fault.TYPE_MISMATCH
    out = evaluate(parse("true < false"), GPU0)
    assert out.fault is Fault.TYPE_MISMATCH


def test_equality_across_variants_is_mismatch():
    out = evaluate(parse('device.attributes["numaNode"] == true'), GPU0)
    assert out.fault is Fault.TYPE_MISMATCH and out.detail == "=="


@pytest.mark.parametrize("text, expected", [
    ('device.attributes["numaNode"] <= 0', True),
    ('device.attributes["numaNode"] > 0', False),
    ('device.attributes["numaNode"] != 1', True),
    ('device.attributes["pciRoot"] == "pci-root0"', True),
    ('device.kind == "Gpu"', True),
    ('device.kind == "Nic"', False),
    ('!(device.kind == "Nic") && 0 >= device.attributes["numaNode"]', True),
])
def test_evaluate_on_gpu0(text, expected):
    out = evaluate(parse(text), GPU0)
    assert out.ok and out.value is expected


def test_short_circuit_suppresses_right_fault():
    fault = 'device.attributes["nosuch"] == 1'
    # the grammar has no bare boolean primary; "false == true" is the false leaf
    assert evaluate(parse(f"false == true && {fault}"), GPU0).value is False
    assert evaluate(parse(f"true == true || {fault}"), GPU0).value is True
    assert evaluate(parse('device.kind == "Nic" && device.attributes["rdma"] == true'), GPU0).value is False
    # not suppressed when the left side does not decide
    assert evaluate(parse(f"true == true && {fault}"), GPU0).fault is Fault.ATTRIBUTE_MISSING
    assert evaluate(parse(f"{fault} || true == true"), GPU0).fault is Fault.ATTRIBUTE_MISSING


@given(asts)
def test_short_circuit_any_right_operand(x):
    assert evaluate(Logic("&&", parse("false == true"), x), GPU0).value is False
    assert evaluate(Logic("||", parse("true == true"), x), GPU0).value is True


def test_format_literal_negative():
    assert selector.format(Compare("==", AttributeRef("x"), Literal(-5))) == 'device.attributes["x"] == -5'


def test_format_not_round_trip():
    ast = parse('!(device.attributes["numaNode"] == 0)')
    assert parse(selector.format(ast)) == ast


def test_sugar_formats_long_form():
    assert selector.format(parse("a == 1")) == 'device.attributes["a"] == 1'


@settings(max_examples=500)
@given(asts)
def test_round_trip(ast):
    text = selector.format(ast)
    assert parse(text) == ast
    assert selector.format(parse(text)) == text


@given(asts)
def test_evaluate_does_not_mutate(ast):
    before = copy.deepcopy(RDMA0)
    evaluate(ast, RDMA0)
    assert RDMA0 == before


FLAGS = ["a", "b", "c", "d"]


def truth_table_oracle(ast, env):
    """Evaluate by rewriting the canonical text into Python and eval()-ing it."""
    src = selector.format(ast)
    for old, new in (('device.attributes[', 'env['), ("&&", " and "), ("||", " or "),
                     ("!(", " not ("), ("true", "True"), ("false", "False")):
        src = src.replace(old, new)
    return eval(src, {"__builtins__": {}}, {"env": env})


def _device(env):
    return DeviceDescriptor("gpu9", DeviceKind.GPU, {"pciRoot": "r", "numaNode": 0, **env})


@settings(max_examples=300)
@given(st.integers(1, 4).flatmap(lambda k: st.tuples(st.just(k), flag_asts(FLAGS[:k]))))
def test_truth_table(arg):
    k, ast = arg
    for bits in itertools.product([False, True], repeat=k):
        env = dict(zip(FLAGS, bits))
        out = evaluate(ast, _device(env))
        assert out.ok
        assert out.value is truth_table_oracle(ast, env)


PRECEDENCE_CORPUS = [
    ("a == true || b == true && c == true", "(a == true || (b == true && c == true))"),
    ("a == true && b == true || c == true", "((a == true && b == true) || c == true)"),
    ("!a == true && b == true", "((!(a == true)) && b == true)"),
    ("a == true || b == true || c == true && d == true",
     "((a == true || b == true) || (c == true && d == true))"),
    ("a != false && !b == true || !(c == true || d == false)",
     "((a != false && (!(b == true))) || (!((c == true || d == false))))"),
]


@pytest.mark.parametrize("bare, parenthesized", PRECEDENCE_CORPUS)
def test_precedence_corpus(bare, parenthesized):
    assert parse(bare) == parse(parenthesized)
    for bits in itertools.product([False, True], repeat=4):
        dev = _device(dict(zip(FLAGS, bits)))
        assert evaluate(parse(bare), dev) == evaluate(parse(parenthesized), dev)
