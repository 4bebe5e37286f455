from __future__ import annotations

import pytest

from transduct import TEXT, REAL, define_record, list_of, slot, trace, validate


@pytest.fixture(autouse=True)
def sink():
    """Fresh in-memory trace sink per test; also returned for inspection."""
    fresh = trace.InMemorySink()
    with trace.use_sink(fresh):
        yield fresh


@pytest.fixture
def loan_application():
    return define_record(
        "LoanApplication",
        [
            slot("last_name", "text", "applicant family name"),
            slot("income", "real", "yearly income"),
            slot("debt", "real", "outstanding debt"),
            slot("credit_history", "text", "free-text credit history"),
        ],
    )


@pytest.fixture
def credit_evaluation():
    return define_record(
        "CreditEvaluation",
        [
            slot("risk_score", "integer", "0-100 risk score"),
            slot("risk_class", "text", "risk bucket", enum=("low", "medium", "high")),
        ],
    )


@pytest.fixture
def smith(loan_application):
    return validate(
        {
            "last_name": "Smith",
            "income": 60000,
            "debt": 25000,
            "credit_history": "late payment in 2021",
        },
        loan_application,
    )


@pytest.fixture
def question_type():
    return define_record(
        "Question",
        [
            slot("prompt", TEXT, "the question text"),
            slot("options", list_of(TEXT), "candidate answers"),
        ],
    )


@pytest.fixture
def answer_type():
    return define_record(
        "Answer",
        [
            slot("options", list_of(TEXT), "candidate answers"),
            slot("choice", TEXT, "the selected option"),
        ],
    )


@pytest.fixture
def empty_type():
    return define_record("Empty", [])
