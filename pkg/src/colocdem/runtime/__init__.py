"""Rank workers, transport and the exchange ledger."""
from .ledger import CLASSES, ExchangeLedger
from .transport import Transport
from .world import RunConfig, Scene, World, ledger_report, spawn_world

__all__ = ["CLASSES", "ExchangeLedger", "RunConfig", "Scene", "Transport", "World",
           "ledger_report", "spawn_world"]
