from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convsearch.core import (
    ComponentInstance,
    ComponentKind,
    ContractViolation,
    ConversationRecord,
    Message,
    SvoaQuadruplet,
    as_vector,
    cosine_similarity,
    l2_normalize,
    render_component_text,
    render_conversation_text,
)

from oracles import oracle_cosine

V = as_vector


# ---------------------------------------------------------------------------
# cosine_similarity
# ---------------------------------------------------------------------------

def test_cosine_identity() -> None:
    assert cosine_similarity(V([1, 0, 0]), V([1, 0, 0])) == 1.0


def test_cosine_orthogonal() -> None:
    assert cosine_similarity(V([1, 0]), V([0, 1])) == 0.0


def test_cosine_hand_computed() -> None:
    # dot = 24, norms = 5 * 5
    assert cosine_similarity(V([3, 4]), V([4, 3])) == pytest.approx(0.96, abs=1e-12)


def test_cosine_zero_norm_is_neutral() -> None:
    assert cosine_similarity(V([0, 0]), V([1, 2])) == 0.0
    assert cosine_similarity(V([1, 2]), V([0, 0])) == 0.0


def test_cosine_dimension_mismatch_names_both() -> None:
    with pytest.raises(ContractViolation, match="2 vs 3"):
        cosine_similarity(V([1, 0]), V([1, 0, 0]))


# magnitudes below 1e-6 collapse to zero: squared norms of near-denormal
# coordinates underflow, where BLAS and pure-Python math legitimately differ
coordinate = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False).map(
    lambda x: 0.0 if abs(x) < 1e-6 else x
)
vectors = st.lists(coordinate, min_size=2, max_size=8)


def same_length(data, a):
    return data.draw(st.lists(coordinate, min_size=len(a), max_size=len(a)))


@given(data=st.data())
@settings(max_examples=100, deadline=None)
def test_cosine_symmetry_and_oracle(data) -> None:
    a = data.draw(vectors)
    b = same_length(data, a)
    lhs = cosine_similarity(V(a), V(b))
    rhs = cosine_similarity(V(b), V(a))
    assert lhs == pytest.approx(rhs, abs=1e-12)
    assert lhs == pytest.approx(oracle_cosine(a, b), abs=1e-9)
    assert -1.0 - 1e-9 <= lhs <= 1.0 + 1e-9


@given(data=st.data(), alpha=st.floats(0.01, 100), beta=st.floats(0.01, 100))
@settings(max_examples=100, deadline=None)
def test_cosine_scale_invariance(data, alpha: float, beta: float) -> None:
    a = data.draw(vectors)
    b = same_length(data, a)
    base = cosine_similarity(V(a), V(b))
    scaled = cosine_similarity(V([alpha * x for x in a]), V([beta * y for y in b]))
    assert scaled == pytest.approx(base, abs=1e-9)


@given(data=st.data())
@settings(max_examples=50, deadline=None)
def test_cosine_of_normalized_equals_dot(data) -> None:
    a = data.draw(vectors)
    b = same_length(data, a)
    na, nb = l2_normalize(V(a)), l2_normalize(V(b))
    assert cosine_similarity(na, nb) == pytest.approx(float(np.dot(na, nb)), abs=1e-9)


# ---------------------------------------------------------------------------
# l2_normalize
# ---------------------------------------------------------------------------

def test_l2_normalize_345_triangle() -> None:
    assert np.allclose(l2_normalize(V([3, 4])), [0.6, 0.8])


def test_l2_normalize_zero_vector() -> None:
    assert np.array_equal(l2_normalize(V([0, 0])), [0.0, 0.0])


def test_l2_normalize_already_unit() -> None:
    assert np.allclose(l2_normalize(V([1, 0])), [1.0, 0.0])


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

def quad(subject="user", verb="asks", obj="questions", adjunct=None, idx=0) -> SvoaQuadruplet:
    return SvoaQuadruplet(subject, verb, obj, adjunct, idx)


def test_render_svoa_with_adjunct() -> None:
    q = quad(adjunct="about climate change")
    assert render_component_text(q, ComponentKind.SVOA) == "user asks questions about climate change"


def test_render_svoa_without_adjunct_matches_svo() -> None:
    q = SvoaQuadruplet("user", "mentions", "Christmas", None, 0)
    assert render_component_text(q, ComponentKind.SVOA) == "user mentions Christmas"
    assert render_component_text(q, ComponentKind.SVOA) == render_component_text(
        q, ComponentKind.SVO
    )


def test_render_sv() -> None:
    q = SvoaQuadruplet("assistant", "offers", "advice", "regarding data protection", 0)
    assert render_component_text(q, ComponentKind.SV) == "assistant offers"


def test_render_svoa_differs_from_svo_iff_adjunct_present() -> None:
    with_adj = quad(adjunct="about climate change")
    without = quad()
    assert render_component_text(with_adj, ComponentKind.SVOA) != render_component_text(
        with_adj, ComponentKind.SVO
    )
    assert render_component_text(without, ComponentKind.SVOA) == render_component_text(
        without, ComponentKind.SVO
    )


def test_render_rejects_conversation_kind() -> None:
    with pytest.raises(ContractViolation):
        render_component_text(quad(), ComponentKind.CONVERSATION)


def test_render_conversation_single_line() -> None:
    conv = ConversationRecord.from_texts("c", [("user", "hi")])
    assert render_conversation_text(conv) == "user: hi"


def test_render_conversation_preserves_order() -> None:
    conv = ConversationRecord.from_texts("c", [("user", "hi"), ("assistant", "hello")])
    assert render_conversation_text(conv) == "user: hi\nassistant: hello"


# ---------------------------------------------------------------------------
# type invariants
# ---------------------------------------------------------------------------

def test_message_rejects_empty_role_and_text() -> None:
    with pytest.raises(ContractViolation):
        Message(0, "", "hi")
    with pytest.raises(ContractViolation):
        Message(0, "user", "   ")


def test_conversation_rejects_bad_indices() -> None:
    with pytest.raises(ContractViolation):
        ConversationRecord("c", (Message(1, "user", "hi"),))
    with pytest.raises(ContractViolation):
        ConversationRecord("c", ())
    with pytest.raises(ContractViolation):
        ConversationRecord("", (Message(0, "user", "hi"),))


def test_quadruplet_rejects_literal_no_information_adjunct() -> None:
    with pytest.raises(ContractViolation):
        SvoaQuadruplet("user", "asks", "questions", "No Information", 0)


def test_component_instance_invariants() -> None:
    vec = V([1.0, 0.0])
    with pytest.raises(ContractViolation):  # conversation must not carry an index
        ComponentInstance(ComponentKind.CONVERSATION, "t", vec, source_message_index=0)
    with pytest.raises(ContractViolation):  # sv requires a quadruplet ref
        ComponentInstance(ComponentKind.SV, "t", vec, source_message_index=0)
    with pytest.raises(ContractViolation):  # message must not carry a ref
        ComponentInstance(
            ComponentKind.MESSAGE, "t", vec, source_message_index=0, quadruplet_ref="r"
        )


def test_component_kind_has_exactly_five_members() -> None:
    assert {k.value for k in ComponentKind} == {"conversation", "message", "sv", "svo", "svoa"}
