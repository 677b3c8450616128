"""Command dispatcher: one subcommand per tool, arguments generated from each tool's parameter schema."""
import argparse
import logging
import sys
from typing import Any, Dict, List, Optional

from .report import build_help_text
from .tensor import set_num_threads
from .tools import default_tools
from .tools.base import EXIT_CHECK_FAILED, EXIT_CONFIG, BaseTool

logger = logging.getLogger(__name__)

_SCALARS = {"string": str, "integer": int, "number": float}


def _add_arguments(parser: argparse.ArgumentParser, schema: Dict[str, Any]) -> None:
    required = set(schema.get("required", []))
    for name, spec in schema["properties"].items():
        kind = spec.get("type", "string")
        kwargs: Dict[str, Any] = {"help": spec.get("description")}
        if kind == "boolean":
            parser.add_argument(f"--{name.replace('_', '-')}", dest=name, action="store_true", **kwargs)
            continue
        if kind == "array":
            kwargs["nargs"] = "+"
            kwargs["type"] = _SCALARS[spec.get("items", {}).get("type", "string")]
        else:
            kwargs["type"] = _SCALARS[kind]
        if "enum" in spec:
            kwargs["choices"] = spec["enum"]
        if "default" in spec:
            kwargs["default"] = spec["default"]
        if name in required:
            parser.add_argument(name, **kwargs)
        else:
            parser.add_argument(f"--{name.replace('_', '-')}", dest=name, **kwargs)


class DmsaCommandLine:
    """Registry of tools exposed as subcommands."""

    def __init__(self, tools: Optional[List[BaseTool]] = None):
        self.tools: Dict[str, BaseTool] = {t.name: t for t in (tools or default_tools())}
        logger.debug(f"command line initialized with {len(self.tools)} tools")

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(
            prog="dmsanet",
            description="DMSA block and DMSANet reference implementation.",
            epilog=build_help_text(list(self.tools.values())),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        parser.add_argument("--threads", type=int, default=1, help="Kernel worker threads (default 1)")
        verbosity = parser.add_mutually_exclusive_group()
        verbosity.add_argument("--quiet", action="store_true", help="Only log warnings and errors")
        verbosity.add_argument("--verbose", action="store_true", help="Debug logging")
        sub = parser.add_subparsers(dest="command", required=True, metavar="command")
        for tool in self.tools.values():
            _add_arguments(sub.add_parser(tool.name, help=tool.description, description=tool.description),
                           tool.parameters)
        return parser

    def _execute_tool(self, tool_name: str, parameters: Dict[str, Any]) -> Dict[str, Any]:
        if tool_name not in self.tools:
            return {"status": "error", "error_message": f"Tool '{tool_name}' not found", "exit_code": EXIT_CONFIG}

        tool = self.tools[tool_name]
        try:
            return tool.execute(**parameters)
        except Exception as e:
            logger.error(f"Tool execution failed: {e}")
            return {"status": "error", "error_message": f"Tool error: {str(e)}", "exit_code": EXIT_CHECK_FAILED}

    def run(self, argv: Optional[List[str]] = None) -> int:
        parser = self.build_parser()
        args = vars(parser.parse_args(argv))
        command = args.pop("command")
        threads = args.pop("threads")
        quiet, verbose = args.pop("quiet"), args.pop("verbose")

        logging.basicConfig(level=logging.WARNING if quiet else logging.DEBUG if verbose else logging.INFO)
        if threads < 1:
            print(f"Config error: --threads must be >= 1, got {threads}", file=sys.stderr)
            return EXIT_CONFIG
        set_num_threads(threads)

        params = {k: v for k, v in args.items() if v is not None}
        result = self._execute_tool(command, params)
        if result.get("status") == "success":
            print(result["result"])
            return 0
        if result.get("result"):
            print(result["result"])
        print(result.get("error_message", "unknown error"), file=sys.stderr)
        return int(result.get("exit_code", EXIT_CHECK_FAILED))


def main(argv: Optional[List[str]] = None) -> int:
    return DmsaCommandLine().run(argv)
