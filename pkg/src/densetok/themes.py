"""Rich theme definitions for densetok console output."""
from rich.theme import Theme

THEMES = {
    "monokai": Theme({
        "densetok.info": "dim white",
        "densetok.success": "bold green",
        "densetok.warning": "bold yellow",
        "densetok.error": "bold red",
        "densetok.muted": "dim",
        "densetok.highlight": "bold magenta",
        "densetok.metric": "bold cyan",
        "densetok.header": "bold underline cyan",
    }),
    "dracula": Theme({
        "densetok.info": "#6272a4",
        "densetok.success": "bold #50fa7b",
        "densetok.warning": "bold #f1fa8c",
        "densetok.error": "bold #ff5555",
        "densetok.muted": "#6272a4",
        "densetok.highlight": "bold #bd93f9",
        "densetok.metric": "bold #8be9fd",
        "densetok.header": "bold underline #ff79c6",
    }),
    "minimal": Theme({
        "densetok.info": "dim",
        "densetok.success": "green",
        "densetok.warning": "yellow",
        "densetok.error": "red",
        "densetok.muted": "dim",
        "densetok.highlight": "bold",
        "densetok.metric": "bold",
        "densetok.header": "bold underline",
    }),
}

DEFAULT_THEME = "monokai"


def get_theme(name: str) -> Theme:
    return THEMES.get(name, THEMES[DEFAULT_THEME])
