use crate::error::{Error, Result};

/// Student parameters and their exponential moving average (the teacher).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub student: Vec<f64>,
    pub teacher: Vec<f64>,
}

impl ModelPair {
    /// Teacher starts as an exact copy of the student.
    pub fn new(student: Vec<f64>) -> Self {
        Self { teacher: student.clone(), student }
    }

    /// `teacher <- decay * teacher + (1 - decay) * student`.
    pub fn ema_update(&mut self, decay: f64) -> Result<()> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1)")));
        }
        if self.teacher.len() != self.student.len() {
            return Err(Error::Shape("student and teacher differ in size".into()));
        }
        for (t, s) in self.teacher.iter_mut().zip(&self.student) {
            *t = decay * *t + (1.0 - decay) * s;
        }
        Ok(())
    }

    pub fn distance(&self) -> f64 {
        self.teacher
            .iter()
            .zip(&self.student)
            .map(|(t, s)| (t - s) * (t - s))
            .sum::<f64>()
            .sqrt()
    }
}
