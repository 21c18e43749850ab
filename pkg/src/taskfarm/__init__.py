"""Task-farming orchestration for volunteer browser workers.

A task manager hands small units of work to transient worker sessions over
two interchangeable transports, survives workers vanishing without warning,
and records enough to analyse how session churn shapes throughput.  A
discrete-event simulator drives the same client logic against the same
server code so whole experiments replay deterministically in virtual time.
"""

__version__ = "0.1.0"
