use crate::nnet::{NnError, ParamStore, Real};

/// `teacher <- m * teacher + (1 - m) * student`, elementwise.
pub fn ema_update<T: Real>(
    teacher: &mut ParamStore<T>,
    student: &ParamStore<T>,
    m: f64,
) -> Result<(), NnError> {
    if !(0.0..=1.0).contains(&m) {
        return Err(NnError::Config(format!("EMA decay {m} outside [0, 1]")));
    }
    teacher.check_schema(student)?;
    let (a, b) = (T::of(m), T::of(1.0 - m));
    for ((_, t), (_, s)) in teacher.iter_mut().zip(student.iter()) {
        for (t, &s) in t.data_mut().iter_mut().zip(s.data()) {
            *t = a * *t + b * s;
        }
    }
    Ok(())
}
