"""CompAct training toolkit."""
