"""Command plumbing shared by the CLI: result models that render as rich tables or JSON."""
import abc
from typing import Any, Iterable, Mapping, Optional, Sequence

import click
from pydantic import BaseModel
from rich import print as rprint
from rich.table import Table


class OutputModel(abc.ABC, BaseModel):
    @abc.abstractmethod
    def get_human_readable_output(self) -> Iterable[Any]:
        pass

    def get_js_readable_output(self, **kwargs) -> str:
        """JSON with sorted keys, so identical results print identically"""
        return self.json(sort_keys=True, **kwargs)


_TEXT_COLUMNS = {"dataset", "method", "flags", "ordering", "model", "source", "path", "status"}


def metrics_table(
    rows: Sequence[Mapping[str, Any]], columns: Sequence[str], title: Optional[str] = None
) -> Table:
    """A rich table with one row per mapping; floats get four decimals."""
    table = Table(title=title)
    for column in columns:
        table.add_column(column, justify="left" if column in _TEXT_COLUMNS else "right")

    for row in rows:
        table.add_row(*(_format_cell(row.get(column)) for column in columns))

    return table


def _format_cell(value: Any) -> str:
    if value is None:
        return "-"
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


class NextPoiCommand(click.Command):
    """Adds --json / --json-pretty; an OutputModel returned by the callback is printed here."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.params.append(click.Option(["--json"], is_flag=True, help="Show output as JSON"))
        self.params.append(
            click.Option(["--json-pretty"], is_flag=True, help="Pretty print JSON output")
        )

    def invoke(self, ctx):
        return_json = ctx.params.pop("json")
        json_pretty = ctx.params.pop("json_pretty")
        result = super().invoke(ctx)

        if not isinstance(result, OutputModel):
            return result

        if json_pretty:
            click.echo(result.get_js_readable_output(indent=4))
        elif return_json:
            click.echo(result.get_js_readable_output())
        else:
            for output in result.get_human_readable_output():
                rprint(output)
        return None
