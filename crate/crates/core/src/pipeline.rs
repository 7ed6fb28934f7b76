//! The derive, solve and evolve stages driven by a [`ModelConfig`].

use std::fmt::Write as _;

use num_complex::Complex64;
use thiserror::Error;

use crate::config::{ConfigError, ModelConfig, SolveMode};
use crate::constraints::{
    clock_gauge_conditions, default_elimination, generate_constraints, residual_generator, solve_newton,
    solve_surface, ConstraintSet, GaugeFixing, ReducedSystem, ReductionError,
};
use crate::dynamics::{derive_equations, from_hamiltonian, integrate, uniform_grid, DynamicsError, EffectiveSystem, IntegratorConfig, Trajectory};
use crate::moments::{MomentAlgebra, MomentVar, StatePoint};
use crate::poly::PolyError;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Reduction(#[from] ReductionError),
    #[error("{0}")]
    Dynamics(#[from] DynamicsError),
    #[error("{0}")]
    Poly(#[from] PolyError),
}

#[derive(Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub ma: MomentAlgebra,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Self {
        let ma = MomentAlgebra::new(cfg.algebra.clone());
        Model { cfg, ma }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Ok(Model::new(ModelConfig::parse(text)?))
    }

    pub fn names(&self) -> &[String] {
        self.ma.names()
    }

    /// Initial values from the config, with every coordinate of degree up to
    /// the working order defaulting to zero.
    pub fn initial_state(&self) -> Result<StatePoint, PipelineError> {
        let mut s = StatePoint::new(self.cfg.hbar);
        for (k, v) in self.cfg.param_values() {
            s.set_param(&k, v);
        }
        for v in crate::moments::state_variables(self.ma.n(), self.cfg.half_order) {
            s.set(v, 0.0);
        }
        if let Some(c) = self.cfg.clock {
            s.set(MomentVar::Expect(c), self.cfg.evolve.start);
        }
        let env = s.clone();
        for (v, p) in &self.cfg.evolve.initial {
            let x = p.eval(&|a| env.lookup(a))?;
            s.set(v.clone(), x);
        }
        Ok(s)
    }

    pub fn integrator_config(&self) -> IntegratorConfig {
        IntegratorConfig {
            substeps: self.cfg.evolve.substeps,
            halt_on_violation: self.cfg.evolve.halt_on_violation,
            reality_tol: self.cfg.evolve.reality_tol,
            semiclassical_budget: self.cfg.evolve.semiclassical_budget,
        }
    }

    pub fn grid(&self) -> Vec<f64> {
        let e = &self.cfg.evolve;
        uniform_grid(e.start, e.stop, e.steps)
    }
}

#[derive(Clone, Debug)]
pub struct Derived {
    pub constraints: Option<ConstraintSet>,
    pub gauge: Option<GaugeFixing>,
    pub constraints_txt: String,
    pub gauge_txt: String,
}

pub fn derive(model: &Model) -> Derived {
    let names = model.names();
    let h = model.cfg.half_order;
    let mut constraints_txt = String::new();
    let mut gauge_txt = String::new();
    let mut constraints = None;
    let mut gauge = None;
    if let Some(c) = &model.cfg.constraint {
        let cs = generate_constraints(&model.ma, c, h);
        let _ = writeln!(constraints_txt, "# half_order {}: {} functions over {} variables", h, cs.len(), cs.variables().len());
        for (i, f) in cs.functions.iter().enumerate() {
            let _ = writeln!(constraints_txt, "C[{}] = {}", cs.label(i), f.dump(names));
        }
        constraints = Some(cs);
    } else {
        constraints_txt.push_str("# no constraint\n");
    }
    if let Some(x) = model.cfg.clock {
        let gf = clock_gauge_conditions(&model.ma, x, h);
        let _ = writeln!(gauge_txt, "# clock {}", names[x]);
        for (v, p) in &gf.conditions {
            let _ = writeln!(gauge_txt, "{} = {}", v.name(names), p.dump(names));
        }
        gauge = Some(gf);
    } else {
        gauge_txt.push_str("# no clock\n");
    }
    Derived { constraints, gauge, constraints_txt, gauge_txt }
}

#[derive(Clone, Debug)]
pub struct Solved {
    pub reduced: Option<ReducedSystem>,
    pub system: EffectiveSystem,
    pub report: String,
    /// Largest constraint residual at the Newton-refined initial point.
    pub newton_residual: Option<f64>,
    /// Largest difference between series and Newton eliminated values.
    pub series_newton_gap: Option<f64>,
}

pub fn solve(model: &Model, derived: &Derived, branch: Option<i8>) -> Result<Solved, PipelineError> {
    let names = model.names();
    let mut report = String::new();
    let (Some(cs), Some(gf)) = (&derived.constraints, &derived.gauge) else {
        let h = model
            .cfg
            .hamiltonian
            .as_ref()
            .ok_or_else(|| ReductionError::UnsupportedSystem("nothing to solve".into()))?;
        let system = from_hamiltonian(&model.ma, h, model.cfg.half_order);
        let _ = writeln!(report, "# unconstrained evolution generated by <H>");
        report.push_str(&system.dump());
        return Ok(Solved { reduced: None, system, report, newton_residual: None, series_newton_gap: None });
    };
    let branch = branch.unwrap_or(model.cfg.solve.branch);
    let clock = gf.clock;
    let eliminate = match &model.cfg.solve.eliminate {
        Some(v) => v.clone(),
        None => default_elimination(&model.ma, clock, cs.half_order)?,
    };
    let mut rs = solve_surface(cs, gf, &eliminate, branch)?;
    let c_ham = residual_generator(&model.ma, cs, &mut rs)?;
    let system = derive_equations(&model.ma, &rs)?;

    let sign = if branch > 0 { "+" } else { "-" };
    let _ = writeln!(report, "branch = {}", sign);
    let _ = writeln!(report, "mode = {}", model.cfg.solve.mode);
    let _ = writeln!(report, "clock = {}", names[clock]);
    let phys: Vec<String> = rs.physical_vars.iter().map(|v| v.name(names)).collect();
    let _ = writeln!(report, "physical = [{}]", phys.join(", "));
    let _ = writeln!(report, "# eliminated variables");
    for (v, p) in rs.eliminated_physical()? {
        let _ = writeln!(report, "{} = {}", v.name(names), p.dump(names));
    }
    let _ = writeln!(report, "# residual generator");
    let _ = writeln!(report, "C_Ham = {}", c_ham.dump(names));
    let rate = rs.on_surface(&model.ma.poisson_bracket(&MomentVar::Expect(clock).poly(), &c_ham))?;
    let _ = writeln!(report, "{{<{}>, C_Ham}} = {}", names[clock], rate.dump(names));
    let _ = writeln!(report, "# effective equations");
    report.push_str(&system.dump());

    let init = model.initial_state()?;
    let series = rs.complete_state(&init)?;
    let ns = solve_newton(cs, Some(gf), &eliminate, &series, Some(branch))?;
    let gap = eliminate
        .iter()
        .map(|v| (series.get(v).unwrap_or_default() - ns.point.get(v).unwrap_or_default()).norm())
        .fold(0.0, f64::max);
    let _ = writeln!(report, "# numeric spot check at the initial state");
    let _ = writeln!(report, "newton_residual = {:.6e}", ns.residual);
    let _ = writeln!(report, "newton_iterations = {}", ns.iterations);
    let _ = writeln!(report, "series_newton_gap = {:.6e}", gap);
    if model.cfg.solve.mode == SolveMode::Newton {
        let _ = writeln!(report, "# newton values");
        for v in &eliminate {
            let x = ns.point.get(v).unwrap_or_default();
            let _ = writeln!(report, "{} = {}", v.name(names), fmt_c(x));
        }
    }
    Ok(Solved {
        reduced: Some(rs),
        system,
        report,
        newton_residual: Some(ns.residual),
        series_newton_gap: Some(gap),
    })
}

pub fn fmt_c(x: Complex64) -> String {
    format!("{:.16e}{:+.16e}i", x.re, x.im)
}

pub fn evolve(model: &Model, solved: &Solved) -> Result<Trajectory, PipelineError> {
    let init = model.initial_state()?;
    Ok(integrate(&solved.system, &model.ma, &init, &model.grid(), &model.integrator_config())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "[algebra]\ngenerators = [a, b]\n[parameters]\nc = 3\n[constraint]\nelement = \"a - c*one\"\n[gauge]\nclock = \"b\"\n";

    #[test]
    fn abelian_toy_constraint() {
        let model = Model::parse(TOY).unwrap();
        let d = derive(&model);
        let cs = d.constraints.unwrap();
        assert_eq!(cs.functions[0].dump(model.names()), "<a> - c");
        assert!(cs.functions.iter().skip(1).all(|f| f.min_grade().unwrap_or(0) > 0 || f.is_zero()));
    }
}

#[cfg(test)]
mod particle {
    use super::*;

    const CFG: &str = include_str!("../../../models/relativistic_particle.cfg");

    #[test]
    fn bundled_model_end_to_end() {
        let model = Model::parse(CFG).unwrap();
        let d = derive(&model);
        let lines: Vec<&str> = d.constraints_txt.lines().collect();
        assert_eq!(lines[1], "C[1] = <pt>^2 - <p>^2 - m^2 + D(pt^2) - D(p^2)");
        assert_eq!(lines[2], "C[t] = 2*<pt>*D(t pt) + i*<pt>*hbar - 2*<p>*D(t p)");
        let s = solve(&model, &d, None).unwrap();
        assert!(s.newton_residual.unwrap() < 1e-12);
        print!("{}{}", d.gauge_txt, s.report);
        let tr = evolve(&model, &s).unwrap();
        let q = tr.column(&MomentVar::Expect(2)).unwrap();
        assert!(q.last().unwrap().re > 4.0);
    }
}
