"""Command-line interface for fedmc-admm."""

import logging

import click

from src.cli.commands.run import run_commands

COMMAND_SECTIONS = [
    ("Experiments", ["run", "synth"]),
    ("Diagnostics", ["check"]),
]


class GroupedGroup(click.Group):
    """Click group that displays commands in labelled sections."""

    def format_commands(self, ctx: click.Context, formatter: click.HelpFormatter):
        commands = {
            name: self.get_command(ctx, name) for name in self.list_commands(ctx)
        }
        shown: set[str] = set()

        for section, names in COMMAND_SECTIONS:
            rows = []
            for name in names:
                cmd = commands.get(name)
                if cmd is None or cmd.hidden:
                    continue
                rows.append((name, cmd.get_short_help_str(limit=formatter.width)))
                shown.add(name)
            if rows:
                with formatter.section(section):
                    formatter.write_dl(rows)

        leftover = [
            (name, cmd.get_short_help_str(limit=formatter.width))
            for name, cmd in commands.items()
            if cmd is not None and name not in shown and not cmd.hidden
        ]
        if leftover:
            with formatter.section("Other"):
                formatter.write_dl(leftover)


@click.group(cls=GroupedGroup)
@click.option("--verbose", "-v", count=True, help="-v for progress, -vv for debug output")
def main(verbose: int):
    """FedMC-ADMM - federated matrix completion experiments."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


for cmd in run_commands:
    main.add_command(cmd)


if __name__ == "__main__":
    main()
