"""
CT Planner API Server
Flask server exposing scenario generation, simulation, single decisions and
trace validation
"""

import os
import logging
from datetime import datetime
from functools import lru_cache

import pandas as pd
from flask import Flask, request, jsonify
from flask_cors import CORS

from baselines import BigMrtaAgent, FeasRndAgent, full_communication
from minlp_model import trace_validate
from policy import PolicyAgent, load_checkpoint
from scenario import GenerationConfig, ScenarioError, generate_scenario, scenario_from_dict
from simenv import ContractViolation, EventLog, reset, run_episode


# Configure logging
logging.basicConfig(level=os.environ.get('LOG_LEVEL', 'INFO').upper())
logger = logging.getLogger(__name__)

app = Flask(__name__)
CORS(app)

BAD_INPUT = (ScenarioError, ContractViolation, ValueError, KeyError, TypeError)


@lru_cache(maxsize=8)
def _cached_model(path):
    model, _ = load_checkpoint(path)
    return model


def make_agent(method, seed, checkpoint=None):
    if method == 'feasrnd':
        return FeasRndAgent(seed=seed)
    if method == 'bigmrta':
        return BigMrtaAgent()
    if method in ('capam-td', 'capam', 'mlp'):
        path = checkpoint or os.environ.get('CT_CHECKPOINT')
        if not path:
            raise ValueError(f"method {method!r} needs a checkpoint")
        return PolicyAgent(_cached_model(path), greedy=True, seed=seed)
    raise ValueError(f"unknown method {method!r}")


def _scenario_from_request(data):
    if 'scenario' not in data:
        raise ValueError('No scenario provided')
    scenario = scenario_from_dict(data['scenario'])
    if data.get('full_communication'):
        scenario = full_communication(scenario)
    return scenario


def _error(e, status):
    return jsonify({'success': False, 'error': str(e)}), status


@app.route('/health', methods=['GET'])
def health_check():
    """Health check endpoint"""
    return jsonify({
        'status': 'healthy',
        'timestamp': datetime.now().isoformat(),
        'service': 'CT Planner API'
    })


@app.route('/generate', methods=['POST'])
def generate():
    """Draw a random scenario"""
    try:
        data = request.get_json(silent=True) or {}
        cfg = GenerationConfig.from_dict({k: v for k, v in data.items() if k != 'seed'})
        scenario = generate_scenario(cfg, int(data.get('seed', 0)))
        logger.info(f"Generated scenario N={scenario.N} M={scenario.M}")
        return jsonify({'success': True, 'scenario': scenario.to_dict()})
    except BAD_INPUT as e:
        logger.error(f"Generate request rejected: {e}")
        return _error(e, 400)
    except Exception as e:
        logger.error(f"Generate error: {e}")
        return _error(e, 500)


@app.route('/simulate', methods=['POST'])
def simulate():
    """Run one episode of a posted scenario with a method"""
    try:
        data = request.get_json(silent=True)
        if not data:
            return _error('No data provided', 400)
        scenario = _scenario_from_request(data)
        method = data.get('method', 'bigmrta')
        seed = int(data.get('seed', 0))
        result = run_episode(scenario, make_agent(method, seed, data.get('checkpoint')), seed=seed)
        logger.info(f"Simulated {method}: {result.n_success}/{scenario.N} tasks")
        payload = {
            'success': True,
            'method': method,
            'n_success': result.n_success,
            'completion': result.completion,
            'reward': result.reward,
            'decisions': result.decisions,
            'decision_time': result.decision_time,
            'comm_bytes': result.comm_bytes,
        }
        if data.get('include_log', True):
            payload['legs'] = result.log.to_frame().to_dict(orient='records')
        return jsonify(payload)
    except BAD_INPUT as e:
        logger.error(f"Simulate request rejected: {e}")
        return _error(e, 400)
    except Exception as e:
        logger.error(f"Simulate error: {e}")
        return _error(e, 500)


@app.route('/decide', methods=['POST'])
def decide():
    """
    One decision for the robot pending after replaying `actions`, a list of
    [robot, action] pairs applied from the episode start
    """
    try:
        data = request.get_json(silent=True)
        if not data:
            return _error('No data provided', 400)
        scenario = _scenario_from_request(data)
        seed = int(data.get('seed', 0))
        world = reset(scenario, seed)
        for robot, action in data.get('actions', []):
            if world.done:
                raise ContractViolation('episode already finished')
            world.step(int(robot), int(action))
        if world.done:
            return _error('episode is finished; no decision pending', 400)
        robot = world.current_robot
        method = data.get('method', 'bigmrta')
        action = make_agent(method, seed, data.get('checkpoint')).decide(world, robot)
        return jsonify({
            'success': True,
            'robot': robot,
            'action': int(action),
            't': world.t,
            'feasible': [int(i) for i in world.feasible_mask(robot).nonzero()[0]],
        })
    except BAD_INPUT as e:
        logger.error(f"Decide request rejected: {e}")
        return _error(e, 400)
    except Exception as e:
        logger.error(f"Decide error: {e}")
        return _error(e, 500)


@app.route('/validate-trace', methods=['POST'])
def validate_trace():
    """Check a leg log against the algebraic model"""
    try:
        data = request.get_json(silent=True)
        if not data:
            return _error('No data provided', 400)
        scenario = _scenario_from_request(data)
        log = EventLog.from_frame(pd.DataFrame(data.get('legs', [])))
        report = trace_validate(log, scenario, data.get('S'), data.get('H'))
        return jsonify({
            'success': True,
            'passed': report.passed,
            'mappable': report.mappable,
            'reason': report.reason,
            'n_success': report.n_success,
            'families': report.families_violated(),
            'violations': [
                {'family': v.family, 'name': v.name, 'value': v.value} for v in report.violations[:100]
            ],
        })
    except BAD_INPUT as e:
        logger.error(f"Validate request rejected: {e}")
        return _error(e, 400)
    except Exception as e:
        logger.error(f"Validate error: {e}")
        return _error(e, 500)


def main():
    """Run the Flask development server"""
    port = int(os.environ.get('PORT', 3000))
    debug = os.environ.get('DEBUG', 'true').lower() == 'true'

    logger.info(f"Starting CT Planner API server on port {port}")
    logger.info(f"Debug mode: {debug}")

    app.run(
        host='0.0.0.0',
        port=port,
        debug=debug
    )


if __name__ == "__main__":
    main()
