"""Configuration files: one directive per line, ``;`` comments, quoted
strings for paths and hostnames.

A server file needs only three lines — the ``Server`` flag, a port, and a
vault directory.  Clients additionally name the pad linking them to the
server and where the server lives.  Absence of ``RxFiles`` is meaningful:
with nowhere to put incoming files, incoming transfers are refused.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .errors import ConfigError, MissingRequired, UnknownDirective

# directive name -> argument kind
_DIRECTIVES = {
    "server": None,            # bare flag
    "listenon": "int",
    "vault": "str",
    "user": "int",
    "serveraddr": "str",
    "serverport": "int",
    "rxfiles": "str",
    "havemercy": None,         # bare flag: keep key material after a crash
    "batch": "str",            # repeatable: one /b script line per directive
}


@dataclass
class Config:
    mode: str = "client"                     # "server" | "client"
    listen_port: Optional[int] = None
    vault_path: Optional[str] = None
    user_pad: Optional[int] = None           # pad linking a client to its server
    server_addr: Optional[str] = None
    server_port: Optional[int] = None
    rx_files_dir: Optional[str] = None       # None ⇒ incoming transfers disabled
    have_mercy: bool = False
    batch: list[str] = field(default_factory=list)

    @property
    def server_address(self) -> Optional[tuple[str, int]]:
        if self.server_addr is None or self.server_port is None:
            return None
        return (self.server_addr, self.server_port)


def _split_line(line: str, lineno: int) -> Optional[tuple[str, Optional[str]]]:
    """One line -> (directive, raw argument) with comments stripped.

    The argument keeps its quotes if it had them; ``;`` inside a quoted
    string does not start a comment.
    """
    out = []
    in_quotes = False
    for ch in line:
        if ch == '"':
            in_quotes = not in_quotes
        elif ch == ";" and not in_quotes:
            break
        out.append(ch)
    if in_quotes:
        raise ConfigError(f"line {lineno}: unterminated quote")
    text = "".join(out).strip()
    if not text:
        return None
    parts = text.split(None, 1)
    return parts[0], (parts[1].strip() if len(parts) > 1 else None)


def _parse_arg(name: str, kind: Optional[str], raw: Optional[str],
               lineno: int):
    if kind is None:
        if raw is not None:
            raise ConfigError(
                f"line {lineno}: {name} takes no argument, got {raw!r}")
        return True
    if raw is None:
        raise ConfigError(f"line {lineno}: {name} needs an argument")
    if kind == "int":
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(
                f"line {lineno}: {name} needs a number, got {raw!r}") from None
    # string: quotes optional but must balance
    if raw.startswith('"'):
        if not (len(raw) >= 2 and raw.endswith('"')):
            raise ConfigError(f"line {lineno}: bad quoting in {raw!r}")
        return raw[1:-1]
    return raw


def parse_config(text: str) -> Config:
    """Parse a configuration file body into a validated Config."""
    cfg = Config()
    seen: set[str] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        split = _split_line(line, lineno)
        if split is None:
            continue
        word, raw = split
        key = word.lower()
        if key not in _DIRECTIVES:
            raise UnknownDirective(f"line {lineno}: {word!r}")
        if key in seen and key != "batch":
            raise ConfigError(f"line {lineno}: {word} given twice")
        seen.add(key)
        value = _parse_arg(word, _DIRECTIVES[key], raw, lineno)
        if key == "server":
            cfg.mode = "server"
        elif key == "listenon":
            cfg.listen_port = value
        elif key == "vault":
            cfg.vault_path = value
        elif key == "user":
            cfg.user_pad = value
        elif key == "serveraddr":
            cfg.server_addr = value
        elif key == "serverport":
            cfg.server_port = value
        elif key == "rxfiles":
            cfg.rx_files_dir = value
        elif key == "havemercy":
            cfg.have_mercy = True
        elif key == "batch":
            cfg.batch.append(value)

    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    if cfg.vault_path is None:
        raise MissingRequired("Vault")
    if cfg.listen_port is None:
        raise MissingRequired("ListenOn")
    if not 1 <= cfg.listen_port <= 65_535:
        raise ConfigError(f"ListenOn {cfg.listen_port} is not a UDP port")
    if cfg.mode == "server":
        for name, val in (("User", cfg.user_pad),
                          ("ServerAddr", cfg.server_addr),
                          ("ServerPort", cfg.server_port)):
            if val is not None:
                raise ConfigError(f"{name} makes no sense in server mode")
    else:
        if cfg.user_pad is None:
            raise MissingRequired("User")
        if cfg.server_addr is None:
            raise MissingRequired("ServerAddr")
        if cfg.server_port is None:
            raise MissingRequired("ServerPort")
        if not 1 <= cfg.server_port <= 65_535:
            raise ConfigError(f"ServerPort {cfg.server_port} is not a UDP port")
        if cfg.user_pad < 0:
            raise ConfigError(f"User {cfg.user_pad} is not a pad number")
