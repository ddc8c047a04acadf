from __future__ import annotations


class ProtocolError(Exception):
    """Base for every rejected protocol operation.

    Subclasses are named after the failure; the class name is what ends up
    in the transaction log's ``outcome`` field.
    """


class SchemaViolation(ProtocolError):
    pass
