import logging

from rich.console import Console, Group, RenderableType
from rich.logging import RichHandler
from rich.panel import Panel
from rich.table import Table
from rich.text import Text
from rich.theme import Theme
from rich.tree import Tree

__all__ = [
    "Panel",
    "Group",
    "RenderableType",
    "Table",
    "Tree",
    "Text",
    "console",
    "install_logging",
]

theme = Theme(
    {
        "header": "bold gray50",
        "body": "white",
        "secondary": "italic gray50",
        "pass": "green",
        "fail": "bold red",
        "skipped": "yellow",
    }
)

console = Console(theme=theme)


def install_logging(verbose: bool = False) -> None:
    """Route the `beamlab` logger through the themed console."""
    logger = logging.getLogger("beamlab")
    logger.handlers.clear()
    logger.addHandler(RichHandler(console=console, show_path=False, markup=False))
    logger.setLevel(logging.DEBUG if verbose else logging.INFO)
    logger.propagate = False
