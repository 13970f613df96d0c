from flask import Flask, request, jsonify
from werkzeug.exceptions import HTTPException
import os
import logging
import sys

from config import Config
from memory.clock import parse_timestamp
from memory.errors import USER_ERRORS, RecordNotFound
from memory.longterm import ForgetSelector
from memory.system import MemorySystem

logger = logging.getLogger(__name__)


def create_app(config=None, system=None):
    """Single-tenant JSON API over the memory system."""
    config = config or Config.load()
    logging.basicConfig(level=getattr(logging, str(config.log_level).upper()))
    system = system or MemorySystem.from_config(config)

    app = Flask(__name__)
    app.config['MEMORY_SYSTEM'] = system

    def body():
        data = request.get_json(silent=True)
        if not isinstance(data, dict):
            raise ValueError("Request body must be a JSON object")
        return data

    def required(data, name):
        value = data.get(name) if isinstance(data, dict) else request.args.get(name)
        if value is None or (isinstance(value, str) and not value.strip()):
            raise ValueError(f"{name} is required")
        return value

    @app.errorhandler(RecordNotFound)
    def not_found(e):
        return jsonify({"error": str(e)}), 404

    @app.errorhandler(Exception)
    def failed(e):
        if isinstance(e, HTTPException):
            return jsonify({"error": e.description}), e.code
        if isinstance(e, USER_ERRORS):
            logger.warning(f"Rejected request to {request.path}: {str(e)}")
            return jsonify({"error": str(e)}), 400
        logger.error(f"Error handling {request.path}: {str(e)}", exc_info=True)
        return jsonify({"error": str(e)}), 500

    @app.route('/', methods=['GET'])
    def index():
        """Root endpoint that returns basic API information"""
        return jsonify({
            "name": "MMAG Memory API",
            "version": "1.0.0",
            "status": "running",
            "endpoints": [
                {"path": "/", "methods": ["GET"], "description": "This endpoint - API information"},
                {"path": "/health", "methods": ["GET"], "description": "Health check endpoint"},
                {"path": "/chat", "methods": ["POST"], "description": "Run one chat turn through memory"},
                {"path": "/memory/inspect", "methods": ["GET"], "description": "Everything remembered about a user"},
                {"path": "/memory/edit", "methods": ["POST"], "description": "Edit the bio or a trait"},
                {"path": "/memory/forget", "methods": ["POST"], "description": "Selective forgetting"},
                {"path": "/events", "methods": ["GET", "POST"], "description": "List or schedule events"}
            ]
        })

    @app.route('/health', methods=['GET'])
    def health_check():
        """Health check endpoint for Railway"""
        logger.info(f"Health check called, PORT={os.getenv('PORT')}")
        return jsonify({
            "status": "ok",
            "backend": config.backend,
            "policy": config.policy,
            "environment": {
                "python_version": sys.version,
                "flask_running": True
            }
        }), 200

    @app.route('/chat', methods=['POST'])
    def chat():
        data = body()
        user_id = required(data, 'user_id')
        session_id = required(data, 'session_id')
        text = required(data, 'text')
        policy = config.policy_named(data['policy']) if data.get('policy') else None
        logger.debug(f"Chat turn for {user_id}/{session_id}")
        system.controller.proactive_tick(user_id)
        turn = system.chat_turn(user_id, session_id, text, policy=policy)
        response = {"response": turn.response, "total_tokens": turn.assembly.total_tokens}
        if data.get('explain'):
            response["assembly"] = turn.assembly.to_dict()
        if data.get('end_session'):
            system.end_session(user_id, session_id)
        return jsonify(response)

    @app.route('/memory/inspect', methods=['GET'])
    def memory_inspect():
        return jsonify(system.longterm.inspect(required(None, 'user_id')))

    @app.route('/memory/edit', methods=['POST'])
    def memory_edit():
        data = body()
        user_id = required(data, 'user_id')
        if 'bio' in data:
            bio = system.longterm.edit_bio(user_id, data['bio'])
            return jsonify({"user_id": user_id, "bio_version": bio.version})
        key = required(data, 'trait')
        consent = 'revoked' if data.get('revoke') else 'granted'
        entry = system.longterm.set_trait(user_id, key, data.get('value'), consent)
        return jsonify({"user_id": user_id, "trait": entry.key, "consent": entry.consent})

    @app.route('/memory/forget', methods=['POST'])
    def memory_forget():
        data = body()
        user_id = required(data, 'user_id')
        selector = ForgetSelector.parse(required(data, 'selector'))
        return jsonify(system.forget(user_id, selector))

    @app.route('/events', methods=['POST'])
    def add_event():
        data = body()
        event = system.episodic.add_event(required(data, 'user_id'), parse_timestamp(required(data, 'fire_at')),
                                          required(data, 'payload'))
        return jsonify(event.to_dict()), 201

    @app.route('/events', methods=['GET'])
    def list_events():
        events = system.episodic.list_events(required(None, 'user_id'), request.args.get('status'))
        return jsonify({"events": [e.to_dict() for e in events]})

    return app


if __name__ == '__main__':
    port = int(os.getenv('PORT', 5002))
    create_app().run(host='0.0.0.0', port=port, debug=False)
