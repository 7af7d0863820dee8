//! Lumped circuits: netlists, source waveforms and transient MNA.

mod mna;
mod netlist;

pub use mna::{
    derivative_stencil, diode_current, Linearization, MnaSystem, NewtonConfig, NonlinearBranch,
    PortClosure, StepOutcome, DC_GMIN, DIODE_EXP_CLAMP,
};
pub use netlist::{
    parse_netlist, parse_value, DiodeParams, Element, ElementKind, Netlist, Waveform,
};

/// Reference decks.
pub mod decks {
    /// Fifth-order Chebyshev low-pass driven by a 50 ohm Gaussian source,
    /// loaded by EM port 0.
    pub const CHEBYSHEV: &str = "\
# Chebyshev filter, 1.5 GHz / 0.5 GHz modulated Gaussian source
V VS 1 0 gauss 1.5g 0.5g 1
R RS 1 2 50
C C1 2 0 9.05p
L L1 2 3 16.308n
C C2 3 0 13.48p
L L2 3 4 16.308n
C C3 4 0 9.05p
P EM 4 0 port=0
";

    /// Single-diode mixer with 0.7 V bias; EM port 0 across node 8.
    pub const MIXER: &str = "\
# diode mixer: RF 900 MHz, LO 800 MHz, 0.4 V each
V RF 1 0 sine 900meg 0.4
R R1 1 0 1meg
R R2 1 2 100
R R3 2 0 100
C C1 2 3 1p
L L1 3 6 6n
R R4 3 4 10
R R5 6 9 10
C C2 4 5 1p
V LO 5 0 sine 800meg 0.4
V VB 9 0 dc 0.7
D D1 3 7 is=2n n=2 vt=25.6m
L L2 7 0 3n
C C3 7 8 0.1p
R RL 8 0 1k
P EM 8 0 port=0
";
}
