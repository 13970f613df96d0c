"""mmag command line: chat, replay, memory control, events, routines and evaluation."""
import json
import logging
import sys
from typing import List, Optional

import click

from config import Config
from memory.base import Role, load_jsonl
from memory.clock import FakeClock, IdFactory, SequentialIds, parse_timestamp
from memory.crypto import Keyring
from memory.errors import USER_ERRORS, InvalidMessage, MMAGError
from memory.harness import generate_corpus, run_suite
from memory.longterm import ForgetSelector
from memory.orchestrator import ProactiveTicker
from memory.storage import RecordStore
from memory.system import MemorySystem

logger = logging.getLogger(__name__)


class CliState:
    def __init__(self, config: Config):
        self.config = config
        self._system: Optional[MemorySystem] = None

    def system(self) -> MemorySystem:
        if self._system is None:
            self._system = MemorySystem.from_config(self.config)
        return self._system

    def close(self):
        if self._system is not None:
            self._system.close()
            self._system = None


def emit_json(data):
    click.echo(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False))


@click.group()
@click.option('--config', 'config_path', default=None, help='JSON config file (default: mmag.json if present).')
@click.pass_context
def cli(ctx, config_path):
    config = Config.load(config_path)
    logging.basicConfig(level=getattr(logging, str(config.log_level).upper()), stream=sys.stderr)
    state = CliState(config)
    ctx.obj = state
    ctx.call_on_close(state.close)


@cli.command()
@click.option('--user', default='default', show_default=True)
@click.option('--session', default=None, help='Session id (default: a new one).')
@click.option('--explain', is_flag=True, help='Print the decision trace of every assembly.')
@click.option('--tick-interval', default=30.0, show_default=True, help='Seconds between proactive ticks.')
@click.pass_obj
def chat(state: CliState, user, session, explain, tick_interval):
    """Interactive chat. /scratch, /scratch set KEY VALUE, /end and /quit are understood."""
    system = state.system()
    ids = IdFactory()
    session = session or f"chat-{ids()}"
    ticker = ProactiveTicker(system.controller, lambda: [user], tick_interval)
    system.controller.proactive_tick(user)
    ticker.start()
    try:
        for line in click.get_text_stream('stdin'):
            text = line.strip()
            if not text:
                continue
            if text == '/quit':
                break
            if text == '/end':
                system.end_session(user, session).result()
                click.echo(f"Session {session} ended.")
                session = f"chat-{ids()}"
                continue
            if text == '/scratch':
                for item in system.working.items(session):
                    click.echo(f"{item.key}={item.value} (priority {item.priority})")
                continue
            if text.startswith('/scratch set '):
                parts = text.split(' ', 3)
                if len(parts) < 4:
                    click.echo("usage: /scratch set KEY VALUE", err=True)
                    continue
                system.working.set_item(session, parts[2], parts[3])
                continue
            turn = system.chat_turn(user, session, text)
            click.echo(turn.response)
            if explain:
                click.echo(turn.assembly.explain())
        system.end_session(user, session).result()
    finally:
        ticker.stop(timeout=1.0)


@cli.command()
@click.argument('transcript', type=click.Path(exists=True, dir_okay=False))
@click.option('--user', default='replay', show_default=True)
@click.option('--persist', is_flag=True, help='Write to the configured store instead of a throwaway one.')
@click.option('--explain', is_flag=True)
@click.pass_obj
def replay(state: CliState, transcript, user, persist, explain):
    """Feed the user turns of a JSONL transcript through the full stack."""
    with open(transcript, encoding='utf-8') as f:
        messages = load_jsonl(f.read())
    start = messages[0].timestamp if messages else 0
    clock = FakeClock(start)
    store = None if persist else RecordStore.in_memory(Keyring.ephemeral(), clock)
    system = MemorySystem.from_config(state.config, store=store, clock=clock, ids=SequentialIds('replay'))
    try:
        session = None
        for message in messages:
            if session is not None and message.session_id != session:
                system.end_session(user, session).result()
            session = message.session_id
            if message.role != Role.USER.value:
                logger.debug(f"Skipping {message.role} line {message.id} in replay")
                continue
            clock.set(max(clock.now_ms(), message.timestamp))
            try:
                turn = system.chat_turn(user, session, message.content, clock.now_ms())
            except InvalidMessage as e:
                click.echo(json.dumps({"id": message.id, "skipped": e.reason}, sort_keys=True))
                continue
            click.echo(json.dumps({
                "id": message.id,
                "session_id": session,
                "ts_ms": clock.now_ms(),
                "response": turn.response,
                "total_tokens": turn.assembly.total_tokens,
            }, sort_keys=True, ensure_ascii=False))
            if explain:
                click.echo(turn.assembly.explain())
        if session is not None:
            system.end_session(user, session).result()
    finally:
        system.close()


@cli.group('memory')
def memory_group():
    """Inspect, edit and forget long-term user memory."""


@memory_group.command('inspect')
@click.option('--user', required=True)
@click.pass_obj
def memory_inspect(state: CliState, user):
    emit_json(state.system().longterm.inspect(user))


@memory_group.command('edit')
@click.option('--user', required=True)
@click.option('--bio', default=None, help='Replace the bio text.')
@click.option('--trait', default=None, help='Trait key to set.')
@click.option('--value', default=None, help='Trait value.')
@click.option('--revoke', is_flag=True, help='Revoke consent for the trait.')
@click.pass_obj
def memory_edit(state: CliState, user, bio, trait, value, revoke):
    if (bio is None) == (trait is None):
        raise click.UsageError("Give exactly one of --bio or --trait")
    longterm = state.system().longterm
    if bio is not None:
        result = longterm.edit_bio(user, bio)
        emit_json({"user_id": user, "bio_version": result.version})
    else:
        entry = longterm.set_trait(user, trait, value, 'revoked' if revoke else 'granted')
        emit_json({"user_id": user, "trait": entry.key, "consent": entry.consent})


@memory_group.command('forget')
@click.option('--user', required=True)
@click.option('--all', 'forget_all', is_flag=True)
@click.option('--bio', 'forget_bio', is_flag=True)
@click.option('--trait', default=None)
@click.option('--fact', default=None)
@click.pass_obj
def memory_forget(state: CliState, user, forget_all, forget_bio, trait, fact):
    chosen = [forget_all, forget_bio, trait is not None, fact is not None]
    if sum(chosen) != 1:
        raise click.UsageError("Give exactly one of --all, --bio, --trait or --fact")
    if forget_all:
        selector = ForgetSelector.everything()
    elif forget_bio:
        selector = ForgetSelector.bio()
    elif trait is not None:
        selector = ForgetSelector.trait(trait)
    else:
        selector = ForgetSelector.fact(fact)
    emit_json(state.system().forget(user, selector))


@cli.group('events')
def events_group():
    """Schedule and list future events."""


@events_group.command('add')
@click.option('--user', required=True)
@click.option('--at', 'fire_at', required=True, help='Milliseconds or ISO-8601 (UTC if no offset).')
@click.option('--payload', required=True)
@click.pass_obj
def events_add(state: CliState, user, fire_at, payload):
    try:
        fire_at_ms = parse_timestamp(fire_at)
    except ValueError:
        raise click.BadParameter(f"Cannot parse time '{fire_at}'", param_hint='--at')
    emit_json(state.system().episodic.add_event(user, fire_at_ms, payload).to_dict())


@events_group.command('list')
@click.option('--user', required=True)
@click.option('--status', type=click.Choice(['pending', 'fired', 'expired']), default=None)
@click.pass_obj
def events_list(state: CliState, user, status):
    emit_json([e.to_dict() for e in state.system().episodic.list_events(user, status)])


@cli.group('routines')
def routines_group():
    """Routines detected from interaction history."""


@routines_group.command('show')
@click.option('--user', required=True)
@click.option('--window-days', default=28, show_default=True)
@click.option('--min-support', default=3, show_default=True)
@click.pass_obj
def routines_show(state: CliState, user, window_days, min_support):
    cues = state.system().episodic.detect_routines(user, None, window_days, min_support)
    for cue in cues:
        click.echo(cue.describe())
    if not cues:
        click.echo("No routines detected.")


@cli.group('eval')
def eval_group():
    """Synthetic evaluation suite."""


@eval_group.command('run')
@click.option('--seed', default=7, show_default=True)
@click.option('--sessions', default=10, show_default=True)
@click.option('--facts', default=20, show_default=True)
@click.option('--erasures', default=0, show_default=True)
@click.option('--session-facts', type=int, default=None,
              help='Facts recalled within their own session (default: a tenth of --facts).')
@click.option('--events', 'n_events', default=0, show_default=True)
@click.option('--budget-scale', default=1.0, show_default=True)
@click.option('--policy', default=None, help='Policy preset (default: from config).')
@click.option('--trace-dir', default=None, type=click.Path(file_okay=False))
@click.option('--format', 'output_format', type=click.Choice(['json', 'table']), default='json', show_default=True)
@click.option('--omit-latency', is_flag=True, help='Leave out wall-clock latency fields.')
@click.pass_obj
def eval_run(state: CliState, seed, sessions, facts, erasures, session_facts, n_events, budget_scale, policy, trace_dir,
             output_format, omit_latency):
    if budget_scale <= 0:
        raise click.BadParameter("must be positive", param_hint='--budget-scale')
    config = state.config
    corpus = generate_corpus(seed, sessions, facts, erasures, n_events, session_facts)
    chosen = config.policy_named(policy) if policy else config.default_policy()
    report = run_suite(corpus, config.token_budget(budget_scale), chosen, trace_dir=trace_dir)
    if output_format == 'table':
        click.echo(report.table(include_latency=not omit_latency))
    else:
        click.echo(report.to_json(include_latency=not omit_latency))


@cli.group('config')
def config_group():
    """Configuration helpers."""


@config_group.command('check')
@click.pass_obj
def config_check(state: CliState):
    click.echo(state.config.to_json())
    click.echo("config ok")


def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI; returns 0 on success, 1 on user error, 2 on internal error."""
    try:
        result = cli.main(args=argv, prog_name='mmag', standalone_mode=False)
    except click.Abort:
        click.echo("Aborted.", err=True)
        return 1
    except click.ClickException as e:
        e.show()
        return 1
    except USER_ERRORS as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except MMAGError as e:
        logger.error(f"mmag failed: {str(e)}", exc_info=True)
        click.echo(f"internal error: {e}", err=True)
        return 2
    except Exception as e:
        logger.error(f"Unexpected failure: {str(e)}", exc_info=True)
        click.echo(f"internal error: {e}", err=True)
        return 2
    return result if isinstance(result, int) else 0


if __name__ == '__main__':
    sys.exit(main())
