"""Wait-or-reply turn taking for dialogue agents.

The package trains two next-utterance generators (one per speaker role) and a
classifier that looks at the dialogue history together with both imagined
continuations to decide whether the agent should answer now or keep waiting
for the user to finish.
"""

__version__ = "0.1.0"
