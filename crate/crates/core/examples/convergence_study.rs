//! Error of the forward value against the closed form under joint
//! refinement `(dx, dt) -> (dx/2, dt/4)`.
//!
//! ```bash
//! cargo run --release --example convergence_study
//! ```

use bernstein::acceptance::convergence_errors;

fn main() -> bernstein::Result<()> {
    let levels = [(61, 11), (121, 41), (241, 161), (481, 641)];
    let errors = convergence_errors(&levels)?;
    println!("{:>5} {:>5} {:>10} {:>6}", "nx", "nt", "max error", "order");
    for (j, (&(nx, nt), e)) in levels.iter().zip(&errors).enumerate() {
        let order = if j == 0 { String::new() } else { format!("{:.2}", (errors[j - 1] / e).log2()) };
        println!("{nx:>5} {nt:>5} {e:>10.3e} {order:>6}");
    }
    Ok(())
}
